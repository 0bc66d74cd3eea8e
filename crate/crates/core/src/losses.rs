//! Self-supervised Siamese objectives.
//!
//! SimSiam: `½·D(p¹, sg(z²)) + ½·D(p², sg(z¹))` with `D` the negative cosine
//! similarity and `sg` stop-gradient. BarlowTwins: `Σᵢ(1 − Cᵢᵢ)² + λ·Σᵢ≠ⱼ Cᵢⱼ²`
//! where `C` is the batch cross-correlation of the two embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{barlow_value, Graph, Var};
use crate::models::{EncoderBundle, Mode};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-12;

/// Handling of zero-norm vectors in normalizing denominators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormGuard {
    /// Divide by `max(‖v‖, eps)`.
    Epsilon(f64),
    /// Fail with [`Error::ZeroNorm`].
    Strict,
}

impl Default for NormGuard {
    fn default() -> Self {
        NormGuard::Epsilon(DEFAULT_EPS)
    }
}

impl NormGuard {
    fn eps(self) -> f64 {
        match self {
            NormGuard::Epsilon(e) => e,
            NormGuard::Strict => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Standardize each embedding dimension over the batch before correlating.
    #[default]
    Centered,
    /// Correlate raw embeddings.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsLossOutput {
    pub loss: f64,
    /// Mean cosine alignment between predictions and targets (SimSiam).
    pub mean_cosine: Option<f64>,
    /// Mean diagonal of the cross-correlation matrix (BarlowTwins).
    pub diag_mean: Option<f64>,
}

fn check_rows_nonzero(t: &Tensor) -> Result<()> {
    let d = t.row_len().max(1);
    for row in t.data().chunks(d) {
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm);
        }
    }
    Ok(())
}

/// `−mean_b ⟨p_b/‖p_b‖, z_b/‖z_b‖⟩`. `z` should already be detached.
pub fn negative_cosine(g: &mut Graph, p: Var, z: Var, guard: NormGuard) -> Result<Var> {
    if g.shape(p) != g.shape(z) || g.shape(p).len() != 2 {
        return Err(shape_err!("negative_cosine {:?} vs {:?}", g.shape(p), g.shape(z)));
    }
    if guard == NormGuard::Strict {
        check_rows_nonzero(g.value(p))?;
        check_rows_nonzero(g.value(z))?;
    }
    let n = g.shape(p)[0].max(1) as f64;
    let pn = g.normalize_rows(p, guard.eps())?;
    let zn = g.normalize_rows(z, guard.eps())?;
    let prod = g.mul(pn, zn)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n))
}

/// Symmetric SimSiam objective over precomputed predictions and projections.
pub fn simsiam_objective(g: &mut Graph, p1: Var, z1: Var, p2: Var, z2: Var, guard: NormGuard) -> Result<Var> {
    let z1s = g.detach(z1);
    let z2s = g.detach(z2);
    let a = negative_cosine(g, p1, z2s, guard)?;
    let b = negative_cosine(g, p2, z1s, guard)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Cross-correlation `C[D_z × D_z]` of two `[batch, D_z]` embeddings.
pub fn cross_correlation(g: &mut Graph, z1: Var, z2: Var, centering: Centering, guard: NormGuard) -> Result<Var> {
    if g.shape(z1) != g.shape(z2) || g.shape(z1).len() != 2 {
        return Err(shape_err!("cross_correlation {:?} vs {:?}", g.shape(z1), g.shape(z2)));
    }
    if g.shape(z1)[0] < 2 {
        return Err(Error::Degenerate("cross-correlation needs a batch of at least 2".into()));
    }
    let mut cols = [z1, z2];
    for c in cols.iter_mut() {
        let mut t = g.transpose(*c)?;
        if centering == Centering::Centered {
            t = g.standardize_rows(t, DEFAULT_EPS)?;
        }
        if guard == NormGuard::Strict {
            check_rows_nonzero(g.value(t))?;
        }
        *c = g.normalize_rows(t, guard.eps())?;
    }
    g.matmul(cols[0], cols[1], false, true)
}

/// Plain-tensor version of [`negative_cosine`].
pub fn negative_cosine_value(p: &Tensor, z: &Tensor, guard: NormGuard) -> Result<f64> {
    let mut g = Graph::new();
    let (pv, zv) = (g.input(p.clone()), g.input(z.clone()));
    let l = negative_cosine(&mut g, pv, zv, guard)?;
    Ok(g.value(l).item())
}

/// Plain-tensor version of [`cross_correlation`].
pub fn cross_correlation_value(z1: &Tensor, z2: &Tensor, centering: Centering, guard: NormGuard) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.input(z1.clone()), g.input(z2.clone()));
    let c = cross_correlation(&mut g, a, b, centering, guard)?;
    Ok(g.value(c).clone())
}

/// Barlow objective for a given cross-correlation matrix.
pub fn barlow_twins_value(c: &Tensor, lambda: f64) -> Result<f64> {
    if c.ndim() != 2 || c.shape()[0] != c.shape()[1] {
        return Err(shape_err!("cross-correlation must be square, got {:?}", c.shape()));
    }
    Ok(barlow_value(c, lambda))
}

/// Which self-supervised objective a run trains with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SslObjective {
    SimSiam { guard: NormGuard },
    BarlowTwins { lambda: f64, centering: Centering, guard: NormGuard },
}

/// Graph handles produced by one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SslTerms {
    pub loss: Var,
    pub z1: Var,
    pub z2: Var,
    pub output: SsLossOutput,
}

impl SslObjective {
    pub fn simsiam() -> Self {
        SslObjective::SimSiam { guard: NormGuard::default() }
    }

    pub fn barlow(lambda: f64) -> Self {
        SslObjective::BarlowTwins { lambda, centering: Centering::Centered, guard: NormGuard::default() }
    }

    /// Encodes both views (training mode) and evaluates the objective.
    pub fn evaluate(&self, bundle: &EncoderBundle, g: &mut Graph, view1: Var, view2: Var) -> Result<SslTerms> {
        match *self {
            SslObjective::SimSiam { guard } => simsiam_loss(bundle, g, view1, view2, guard),
            SslObjective::BarlowTwins { lambda, centering, guard } => barlow_twins_loss(bundle, g, view1, view2, lambda, centering, guard),
        }
    }
}

/// SimSiam loss of a bundle on two views.
pub fn simsiam_loss(bundle: &EncoderBundle, g: &mut Graph, view1: Var, view2: Var, guard: NormGuard) -> Result<SslTerms> {
    if g.shape(view1) != g.shape(view2) {
        return Err(shape_err!("views {:?} vs {:?}", g.shape(view1), g.shape(view2)));
    }
    let f1 = bundle.backbone(g, view1, Mode::Train)?;
    let z1 = bundle.project(g, f1, Mode::Train)?;
    let p1 = bundle.predict(g, z1, Mode::Train)?;
    let f2 = bundle.backbone(g, view2, Mode::Train)?;
    let z2 = bundle.project(g, f2, Mode::Train)?;
    let p2 = bundle.predict(g, z2, Mode::Train)?;
    let loss = simsiam_objective(g, p1, z1, p2, z2, guard)?;
    let value = g.value(loss).item();
    Ok(SslTerms { loss, z1, z2, output: SsLossOutput { loss: value, mean_cosine: Some(-value), diag_mean: None } })
}

/// BarlowTwins loss of a bundle on two views.
pub fn barlow_twins_loss(
    bundle: &EncoderBundle,
    g: &mut Graph,
    view1: Var,
    view2: Var,
    lambda: f64,
    centering: Centering,
    guard: NormGuard,
) -> Result<SslTerms> {
    if lambda <= 0.0 {
        return Err(Error::Config("barlow lambda must be positive".into()));
    }
    if g.shape(view1) != g.shape(view2) {
        return Err(shape_err!("views {:?} vs {:?}", g.shape(view1), g.shape(view2)));
    }
    let f1 = bundle.backbone(g, view1, Mode::Train)?;
    let z1 = bundle.project(g, f1, Mode::Train)?;
    let f2 = bundle.backbone(g, view2, Mode::Train)?;
    let z2 = bundle.project(g, f2, Mode::Train)?;
    let c = cross_correlation(g, z1, z2, centering, guard)?;
    let loss = g.barlow_objective(c, lambda)?;
    let cv = g.value(c);
    let d = cv.shape()[0];
    let diag = (0..d).map(|i| cv.data()[i * d + i]).sum::<f64>() / d as f64;
    let value = g.value(loss).item();
    Ok(SslTerms { loss, z1, z2, output: SsLossOutput { loss: value, mean_cosine: None, diag_mean: Some(diag) } })
}
