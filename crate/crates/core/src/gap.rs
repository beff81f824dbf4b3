//! Monte-Carlo dynamics-gap estimation and gap-based selection of offline data.
//!
//! The gap at `(s, a)` is `sqrt(mean_j ‖x₁⁽ʲ⁾ − ψ_on(x₁⁽ʲ⁾)‖²)` where
//! `x₁⁽ʲ⁾ = ψ_off(x₀⁽ʲ⁾)` for independent Gaussian latents `x₀⁽ʲ⁾`.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::flow::{gaussian_matrix, CompositeFlow};

pub const DEFAULT_M: usize = 30;

/// Rows pushed through the flows per chunk when estimating many gaps at once.
const CHUNK_ROWS: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub value: f64,
    pub samples: usize,
    /// Per-latent displacement norms.
    pub displacements: Vec<f64>,
}

impl GapEstimate {
    fn from_squared(sq: &[f64]) -> Self {
        let mean = sq.iter().sum::<f64>() / sq.len() as f64;
        GapEstimate {
            value: mean.sqrt(),
            samples: sq.len(),
            displacements: sq.iter().map(|v| v.sqrt()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapThreshold {
    pub xi: f64,
    pub value: f64,
}

fn check_ready(composite: &CompositeFlow, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("Monte-Carlo sample count M must be at least 1"));
    }
    if !composite.is_frozen() {
        return Err(Error::Untrained(
            "gap estimation needs trained, frozen offline and online flows".into(),
        ));
    }
    Ok(())
}

/// Gap estimate for every row of `(states, actions)`.
///
/// Each row draws a stream seed from `rng` in row order and takes its `m`
/// latents from that stream, so a row's estimate depends only on its seed.
pub fn estimate_gap_batch<R: Rng + ?Sized>(
    composite: &CompositeFlow,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    m: usize,
    rng: &mut R,
) -> Result<Vec<GapEstimate>> {
    check_ready(composite, m)?;
    let n = states.nrows();
    if actions.nrows() != n {
        return Err(Error::shape("state and action batches differ in length"));
    }
    let d = composite.latent_dim();
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let per_chunk = (CHUNK_ROWS / m).max(1);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(per_chunk) {
        let end = (start + per_chunk).min(n);
        let rows = (end - start) * m;
        let mut latent = Array2::zeros((rows, d));
        for (e, &seed) in seeds[start..end].iter().enumerate() {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            latent
                .slice_mut(ndarray::s![e * m..(e + 1) * m, ..])
                .assign(&gaussian_matrix(m, d, &mut stream));
        }
        let repeat: Vec<usize> = (start..end).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let s = states.select(Axis(0), &repeat);
        let a = actions.select(Axis(0), &repeat);
        let (x1, x2) = composite.transport(latent.view(), s.view(), a.view())?;
        let diff = x2 - x1;
        let sq: Vec<f64> = diff.outer_iter().map(|r| r.dot(&r)).collect();
        out.extend(sq.chunks(m).map(GapEstimate::from_squared));
    }
    Ok(out)
}

pub fn estimate_gap<R: Rng + ?Sized>(
    composite: &CompositeFlow,
    s: &[f64],
    a: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<GapEstimate> {
    let s = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::shape(e.to_string()))?;
    let a = ArrayView2::from_shape((1, a.len()), a).map_err(|e| Error::shape(e.to_string()))?;
    Ok(estimate_gap_batch(composite, s, a, m, rng)?.remove(0))
}

/// Number of transitions kept from a minibatch of `b` at ratio `xi`.
pub fn kept_count(xi: f64, b: usize) -> usize {
    // the slack absorbs products such as 0.3 * 10 = 3.0000000000000004
    let raw = xi * b as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(b)
}

/// Indices (ascending) of the `⌈ξB⌉` smallest gaps, ties broken by index, and
/// the largest kept gap.
pub fn quantile_select(gaps: &[f64], xi: f64) -> Result<(Vec<usize>, GapThreshold)> {
    if gaps.is_empty() {
        return Err(Error::invalid("cannot select from an empty gap list"));
    }
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::invalid(format!("xi must lie in (0,1], got {xi}")));
    }
    if gaps.iter().any(|g| g.is_nan()) {
        return Err(Error::NonFinite("gap list".into()));
    }
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&i, &j| gaps[i].total_cmp(&gaps[j]).then(i.cmp(&j)));
    let keep = kept_count(xi, gaps.len());
    let mut kept = order[..keep].to_vec();
    let value = gaps[*kept.last().expect("at least one kept")];
    kept.sort_unstable();
    Ok((kept, GapThreshold { xi, value }))
}

/// Transitions whose estimated gap is at most `tau`.
pub fn threshold_filter<R: Rng + ?Sized>(
    data: &[Transition],
    composite: &CompositeFlow,
    tau: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    if !(tau >= 0.0) {
        return Err(Error::invalid("tau must be >= 0"));
    }
    let gaps = dataset_gaps(data, composite, m, rng)?;
    Ok(data
        .iter()
        .zip(&gaps)
        .filter(|(_, g)| **g <= tau)
        .map(|(t, _)| t.clone())
        .collect())
}

/// Gap value of every transition's `(s, a)`.
pub fn dataset_gaps<R: Rng + ?Sized>(
    data: &[Transition],
    composite: &CompositeFlow,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_ready(composite, m)?;
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let (s, a) = state_action_matrices(data);
    Ok(estimate_gap_batch(composite, s.view(), a.view(), m, rng)?
        .into_iter()
        .map(|g| g.value)
        .collect())
}

pub fn state_action_matrices(data: &[Transition]) -> (Array2<f64>, Array2<f64>) {
    let sd = data.first().map_or(0, |t| t.state.len());
    let ad = data.first().map_or(0, |t| t.action.len());
    let s = Array2::from_shape_fn((data.len(), sd), |(i, j)| data[i].state[j]);
    let a = Array2::from_shape_fn((data.len(), ad), |(i, j)| data[i].action[j]);
    (s, a)
}

/// Writes the gap report: one row per queried pair, columns `s…, a…, gap, M, seed`.
pub fn write_gap_report<W: Write>(
    mut w: W,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    gaps: &[GapEstimate],
    seed: u64,
) -> Result<()> {
    if states.nrows() != gaps.len() || actions.nrows() != gaps.len() {
        return Err(Error::shape("gap report columns disagree in length"));
    }
    let mut header: Vec<String> = (0..states.ncols()).map(|i| format!("s{i}")).collect();
    header.extend((0..actions.ncols()).map(|i| format!("a{i}")));
    header.extend(["gap", "M", "seed"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for (i, g) in gaps.iter().enumerate() {
        let mut fields: Vec<String> = states.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        fields.extend(actions.row(i).iter().map(|v| format!("{v:.16e}")));
        fields.push(format!("{:.16e}", g.value));
        fields.push(g.samples.to_string());
        fields.push(seed.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
