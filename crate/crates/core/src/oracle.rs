//! Non-spiking ground truth for both stages.
//!
//! The forward equilibrium is found by damped fixed-point iteration on the
//! last layer's rate, and the backward linear system
//! `β^N = g + K β^N` with
//! `K = (1/V_u)W¹ᵀdiag(Dᶠm¹) · (1/V_u)F²ᵀdiag(D²m²) ⋯ (1/V_u)F^Nᵀdiag(D^N m^N)`
//! is solved either densely (LU) or by fixed-point iteration. The residual
//! checkers recompute everything from the layer maps and share no code with
//! the solvers beyond those maps.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{check_dim, Result, SpideError};
use crate::network::{spectral_norm, DropoutMasks, NetworkParams};
use crate::training::{assemble_from_rates, GradientSet};

/// `σ(x) = min(1, max(0, x))`.
#[inline]
pub fn sigma(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Derivative indicator of `σ`: 1 on the open interval `(0, 1)`.
#[inline]
pub fn sigma_prime(x: f64) -> f64 {
    if x > 0.0 && x < 1.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquilibriumOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Damping `ω` in `α ← (1−ω)α + ω f(α)`.
    pub damping: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100_000,
            damping: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumSolution {
    /// Fixed point of every layer.
    pub alpha_star: Vec<Array1<f64>>,
    /// Pre-activations `z^l` with `α^l* = σ(z^l)`.
    pub preact: Vec<Array1<f64>>,
    /// `‖α^N − f(α^N)‖∞` at termination.
    pub residual: f64,
    pub iterations: usize,
}

impl EquilibriumSolution {
    /// Interiority masks `σ'(z^l)`.
    pub fn masks(&self) -> Vec<Array1<f64>> {
        self.preact.iter().map(|z| z.mapv(sigma_prime)).collect()
    }

    /// Number of coordinates sitting exactly on a clip boundary.
    pub fn boundary_count(&self) -> usize {
        self.preact
            .iter()
            .flat_map(|z| z.iter())
            .filter(|&&v| v == 0.0 || v == 1.0)
            .count()
    }

    pub fn alpha_last(&self) -> &Array1<f64> {
        self.alpha_star.last().expect("at least one layer")
    }
}

/// Evaluate all layer maps once given the last layer's rate from the
/// previous pass. Returns `(pre-activations, rates)`.
pub fn layer_maps(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    alpha_n: Option<ArrayView1<f64>>,
    dropout: &DropoutMasks,
    v_u: f64,
) -> Result<(Vec<Array1<f64>>, Vec<Array1<f64>>)> {
    let mut pre = Vec::with_capacity(params.num_layers());
    let mut alpha: Vec<Array1<f64>> = Vec::with_capacity(params.num_layers());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = if l == 0 {
            let mut z = (layer.weight.apply(x)? + &layer.bias) * &dropout.layers[0];
            if let (Some(w1), Some(a)) = (&params.feedback, alpha_n) {
                z += &(w1.apply(a)? * &dropout.feedback);
            }
            z
        } else {
            (layer.weight.apply(alpha[l - 1].view())? + &layer.bias) * &dropout.layers[l]
        };
        z /= v_u;
        alpha.push(z.mapv(sigma));
        pre.push(z);
    }
    Ok((pre, alpha))
}

/// Independent check of `‖α^N − f(α^N)‖∞`.
pub fn equilibrium_residual(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    dropout: &DropoutMasks,
    v_u: f64,
    alpha_n: ArrayView1<f64>,
) -> Result<f64> {
    let (_, a) = layer_maps(params, x, Some(alpha_n), dropout, v_u)?;
    Ok(max_abs_diff(a.last().unwrap().view(), alpha_n))
}

fn max_abs_diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Solve `α = f(α)` for the network driven by the constant input `x`.
pub fn solve_equilibrium(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    dropout: &DropoutMasks,
    v_u: f64,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumSolution> {
    if !(opts.tol > 0.0) {
        return Err(SpideError::Config("equilibrium tolerance must be positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(SpideError::Config("damping must lie in (0, 1]".into()));
    }
    check_dim("oracle input", params.input_dim(), x.len())?;
    dropout.check_shapes(params)?;

    if !params.has_feedback() {
        let (preact, alpha_star) = layer_maps(params, x, None, dropout, v_u)?;
        return Ok(EquilibriumSolution {
            alpha_star,
            preact,
            residual: 0.0,
            iterations: 1,
        });
    }

    let omega = opts.damping;
    let mut a = Array1::<f64>::zeros(params.last_width());
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (preact, alpha) = layer_maps(params, x, Some(a.view()), dropout, v_u)?;
        let f = alpha.last().unwrap();
        residual = max_abs_diff(f.view(), a.view());
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            // report the fixed point as the consistent pass through f(a)
            let (preact, alpha_star) = if residual == 0.0 {
                (preact, alpha)
            } else {
                layer_maps(params, x, Some(f.view()), dropout, v_u)?
            };
            let residual = equilibrium_residual(params, x, dropout, v_u, alpha_star.last().unwrap().view())?;
            return Ok(EquilibriumSolution {
                alpha_star,
                preact,
                residual,
                iterations: it,
            });
        }
        a = &a * (1.0 - omega) + f * omega;
    }
    Err(SpideError::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Which route `solve_implicit` takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImplicitMethod {
    /// LU solve of the dense `n_N × n_N` system.
    Dense,
    /// Iterate `β ← g + Kβ` by applying the layer chain.
    FixedPoint,
    /// Dense for at most 2000 unknowns, fixed-point otherwise.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImplicitOptions {
    pub method: ImplicitMethod,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ImplicitOptions {
    fn default() -> Self {
        Self {
            method: ImplicitMethod::Auto,
            tol: 1e-13,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitSolution {
    /// Per-layer solution; `beta_star[N-1]` solves the system and earlier
    /// layers follow from the transposed chain.
    pub beta_star: Vec<Array1<f64>>,
    /// `‖β^N − g − Kβ^N‖∞`.
    pub residual: f64,
    /// Product of the masked factors' spectral norms.
    pub contraction: f64,
    pub method: ImplicitMethod,
}

/// Row gains `D⊙m / V_u` of every backward factor: index 0 belongs to `W¹`,
/// index `l ≥ 1` to `F^{l+1}`.
fn factor_gains(params: &NetworkParams, masks: &[Array1<f64>], dropout: &DropoutMasks, v_u: f64) -> Vec<Array1<f64>> {
    (0..params.num_layers())
        .map(|l| {
            let d = if l == 0 { &dropout.feedback } else { &dropout.layers[l] };
            d * &masks[l] / v_u
        })
        .collect()
}

/// Apply one backward factor `(1/V_u) Wᵀ diag(D⊙m)` to `v`.
fn apply_factor(w: &Array2<f64>, gain: &Array1<f64>, v: &Array1<f64>) -> Array1<f64> {
    w.t().dot(&(gain * v))
}

/// Given `β^N`, propagate to all layers: `β^l = (1/V_u)F^{l+1}ᵀdiag(D^{l+1}m^{l+1})β^{l+1}`.
fn propagate(params: &NetworkParams, gains: &[Array1<f64>], beta_n: Array1<f64>) -> Vec<Array1<f64>> {
    let n = params.num_layers();
    let mut beta = vec![Array1::zeros(0); n];
    beta[n - 1] = beta_n;
    for l in (0..n - 1).rev() {
        beta[l] = apply_factor(params.layers[l + 1].weight.weight(), &gains[l + 1], &beta[l + 1]);
    }
    beta
}

/// `K v`, applied factor by factor.
fn apply_k(params: &NetworkParams, gains: &[Array1<f64>], v: &Array1<f64>) -> Array1<f64> {
    let Some(w1) = &params.feedback else {
        return Array1::zeros(v.len());
    };
    let chain = propagate(params, gains, v.clone());
    apply_factor(w1.weight(), &gains[0], &chain[0])
}

/// Independent check of `‖β^N − g − Kβ^N‖∞`.
pub fn implicit_residual(
    params: &NetworkParams,
    masks: &[Array1<f64>],
    dropout: &DropoutMasks,
    v_u: f64,
    g: &Array1<f64>,
    beta_n: &Array1<f64>,
) -> f64 {
    // recompute K β layer by layer with explicit loops
    let n = params.num_layers();
    let mut v = beta_n.clone();
    for l in (1..n).rev() {
        let w = params.layers[l].weight.weight();
        let mut next = Array1::zeros(w.ncols());
        for i in 0..w.nrows() {
            let c = dropout.layers[l][i] * masks[l][i] * v[i] / v_u;
            for j in 0..w.ncols() {
                next[j] += w[[i, j]] * c;
            }
        }
        v = next;
    }
    let mut kb = Array1::<f64>::zeros(beta_n.len());
    if let Some(w1) = &params.feedback {
        let w = w1.weight();
        for i in 0..w.nrows() {
            let c = dropout.feedback[i] * masks[0][i] * v[i] / v_u;
            for j in 0..w.ncols() {
                kb[j] += w[[i, j]] * c;
            }
        }
    }
    beta_n
        .iter()
        .zip(g.iter())
        .zip(kb.iter())
        .fold(0.0, |m, ((b, gi), k)| m.max((b - gi - k).abs()))
}

/// Spectral bound of `K`, the product of masked factor norms.
pub fn masked_contraction(params: &NetworkParams, masks: &[Array1<f64>], dropout: &DropoutMasks, v_u: f64) -> f64 {
    let Some(w1) = &params.feedback else {
        return 0.0;
    };
    let gains = factor_gains(params, masks, dropout, v_u);
    let scaled = |w: &Array2<f64>, gain: &Array1<f64>| -> f64 {
        let m = w * &gain.view().insert_axis(ndarray::Axis(1));
        spectral_norm(&m, 50)
    };
    let mut bound = scaled(w1.weight(), &gains[0]);
    for l in 1..params.num_layers() {
        bound *= scaled(params.layers[l].weight.weight(), &gains[l]);
    }
    bound
}

/// Solve the backward linear system for the rate-space gradient `g`, with
/// the given interiority masks.
pub fn solve_implicit_with_masks(
    params: &NetworkParams,
    masks: &[Array1<f64>],
    dropout: &DropoutMasks,
    v_u: f64,
    g: &Array1<f64>,
    opts: &ImplicitOptions,
) -> Result<ImplicitSolution> {
    let n = params.num_layers();
    if masks.len() != n {
        return Err(SpideError::Contract(format!("expected {n} mask vectors, got {}", masks.len())));
    }
    check_dim("implicit rhs", params.last_width(), g.len())?;
    dropout.check_shapes(params)?;
    let gains = factor_gains(params, masks, dropout, v_u);
    let contraction = masked_contraction(params, masks, dropout, v_u);
    if contraction >= 1.0 {
        return Err(SpideError::SingularSystem { contraction });
    }
    let method = match opts.method {
        ImplicitMethod::Auto if g.len() <= 2000 => ImplicitMethod::Dense,
        ImplicitMethod::Auto => ImplicitMethod::FixedPoint,
        m => m,
    };

    let beta_n = if !params.has_feedback() {
        g.clone()
    } else {
        match method {
            ImplicitMethod::Dense => dense_solve(params, &gains, g, contraction)?,
            _ => fixed_point_solve(params, &gains, g, opts)?,
        }
    };
    let residual = implicit_residual(params, masks, dropout, v_u, g, &beta_n);
    Ok(ImplicitSolution {
        beta_star: propagate(params, &gains, beta_n),
        residual,
        contraction,
        method,
    })
}

fn dense_solve(params: &NetworkParams, gains: &[Array1<f64>], g: &Array1<f64>, contraction: f64) -> Result<Array1<f64>> {
    let w1 = params.feedback.as_ref().expect("feedback present");
    // K = A_1 A_2 ⋯ A_N with A_1 = W¹ᵀ diag(gain_0), A_l = Fˡᵀ diag(gain_{l-1})
    let factor = |w: &Array2<f64>, gain: &Array1<f64>| -> Array2<f64> { w.t().to_owned() * &gain.view().insert_axis(ndarray::Axis(0)) };
    let mut k = factor(w1.weight(), &gains[0]);
    for l in 1..params.num_layers() {
        k = k.dot(&factor(params.layers[l].weight.weight(), &gains[l]));
    }
    let n = g.len();
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - k[[i, j]]);
    let b = DVector::from_iterator(n, g.iter().copied());
    let x = a.lu().solve(&b).ok_or(SpideError::SingularSystem { contraction })?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(SpideError::SingularSystem { contraction });
    }
    Ok(x.iter().copied().collect())
}

fn fixed_point_solve(params: &NetworkParams, gains: &[Array1<f64>], g: &Array1<f64>, opts: &ImplicitOptions) -> Result<Array1<f64>> {
    let mut beta = g.clone();
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let next = g + &apply_k(params, gains, &beta);
        change = max_abs_diff(next.view(), beta.view());
        beta = next;
        if change <= opts.tol {
            return Ok(beta);
        }
        if !change.is_finite() {
            break;
        }
    }
    Err(SpideError::NonConvergence {
        iterations: opts.max_iter,
        residual: change,
    })
}

/// Solve the backward system with masks taken from the equilibrium.
pub fn solve_implicit(
    params: &NetworkParams,
    eq: &EquilibriumSolution,
    dropout: &DropoutMasks,
    v_u: f64,
    g: &Array1<f64>,
    opts: &ImplicitOptions,
) -> Result<ImplicitSolution> {
    solve_implicit_with_masks(params, &eq.masks(), dropout, v_u, g, opts)
}

/// Gradients from the equilibrium and implicit solutions, through the same
/// assembly formulas as the spiking pipeline.
pub fn oracle_gradients(
    params: &NetworkParams,
    eq: &EquilibriumSolution,
    imp: &ImplicitSolution,
    x_bar: ArrayView1<f64>,
    dl_do: &Array1<f64>,
    dropout: &DropoutMasks,
    v_u: f64,
) -> Result<GradientSet> {
    assemble_from_rates(
        params,
        &eq.alpha_star,
        x_bar,
        &imp.beta_star,
        &eq.masks(),
        dropout,
        dl_do,
        v_u,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, Layer, LinearOp};
    use ndarray::array;

    fn toy(w: Option<f64>) -> NetworkParams {
        NetworkParams::new(
            vec![Layer {
                weight: LinearOp::new(array![[1.0]]),
                bias: array![0.0],
            }],
            w.map(|w| LinearOp::new(array![[w]])),
            LinearOp::new(array![[1.0]]),
            array![0.0],
        )
        .unwrap()
    }

    #[test]
    fn sigma_and_mask() {
        assert_eq!(sigma(-0.1), 0.0);
        assert_eq!(sigma(1.3), 1.0);
        assert_eq!(sigma(0.25), 0.25);
        assert_eq!(sigma_prime(0.0), 0.0);
        assert_eq!(sigma_prime(1.0), 0.0);
        assert_eq!(sigma_prime(0.5), 1.0);
    }

    #[test]
    fn scalar_toy_equilibrium_and_beta() {
        let p = toy(Some(0.5));
        let d = DropoutMasks::identity_for(&p);
        let x = array![1.0];
        let eq = solve_equilibrium(&p, x.view(), &d, 2.0, &EquilibriumOptions::default()).unwrap();
        assert!((eq.alpha_star[0][0] - 2.0 / 3.0).abs() < 1e-12);
        for method in [ImplicitMethod::Dense, ImplicitMethod::FixedPoint] {
            let opts = ImplicitOptions {
                method,
                ..Default::default()
            };
            let imp = solve_implicit(&p, &eq, &d, 2.0, &array![0.3], &opts).unwrap();
            assert!((imp.beta_star[0][0] - 0.4).abs() < 1e-12);
            assert!(imp.residual < 1e-12);
        }
    }

    #[test]
    fn zero_drive_and_zero_gradient() {
        let p = toy(Some(0.5));
        let d = DropoutMasks::identity_for(&p);
        let eq = solve_equilibrium(&p, array![0.0].view(), &d, 2.0, &EquilibriumOptions::default()).unwrap();
        assert_eq!(eq.alpha_star[0][0], 0.0);
        let imp = solve_implicit_with_masks(&p, &[array![1.0]], &d, 2.0, &array![0.0], &ImplicitOptions::default()).unwrap();
        assert_eq!(imp.beta_star[0][0], 0.0);
    }

    #[test]
    fn feedforward_is_one_pass() {
        let p = build_network(&[4, 5, 3], 2, false, 1).unwrap();
        let d = DropoutMasks::identity_for(&p);
        let eq = solve_equilibrium(&p, array![1.0, 0.5, 0.2, 0.9].view(), &d, 2.0, &EquilibriumOptions::default()).unwrap();
        assert_eq!(eq.residual, 0.0);
        assert_eq!(eq.iterations, 1);
    }

    #[test]
    fn solver_routes_agree() {
        let mut p = build_network(&[6, 8, 7], 3, true, 17).unwrap();
        p.layers[0].bias.fill(0.5);
        let d = DropoutMasks::identity_for(&p);
        let eq = solve_equilibrium(&p, array![1.0, 0.1, 0.4, 0.8, 0.3, 0.6].view(), &d, 2.0, &EquilibriumOptions::default()).unwrap();
        let g = array![0.1, -0.2, 0.05, 0.3, -0.1, 0.0, 0.2];
        let dense = solve_implicit(&p, &eq, &d, 2.0, &g, &ImplicitOptions { method: ImplicitMethod::Dense, ..Default::default() }).unwrap();
        let fp = solve_implicit(&p, &eq, &d, 2.0, &g, &ImplicitOptions { method: ImplicitMethod::FixedPoint, ..Default::default() }).unwrap();
        for (a, b) in dense.beta_star.iter().zip(&fp.beta_star) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_contractive_system_is_rejected() {
        let p = toy(Some(2.5));
        let d = DropoutMasks::identity_for(&p);
        let err = solve_implicit_with_masks(&p, &[array![1.0]], &d, 2.0, &array![0.3], &ImplicitOptions::default()).unwrap_err();
        assert!(matches!(err, SpideError::SingularSystem { .. }));
    }

    #[test]
    fn scalar_toy_gradient() {
        let p = toy(Some(0.5));
        let d = DropoutMasks::identity_for(&p);
        let x = array![1.0];
        let eq = solve_equilibrium(&p, x.view(), &d, 2.0, &EquilibriumOptions::default()).unwrap();
        let imp = solve_implicit(&p, &eq, &d, 2.0, &array![0.3], &ImplicitOptions::default()).unwrap();
        let grads = oracle_gradients(&p, &eq, &imp, x.view(), &array![0.3], &d, 2.0).unwrap();
        assert!((grads.feedback.as_ref().unwrap()[[0, 0]] - 2.0 / 15.0).abs() < 1e-12);
    }
}
