//! Kolmogorov–Arnold layers.
//!
//! Every edge `(q, n)` of a layer carries a learnable univariate function
//!
//! ```text
//! φ(x) = w_b · silu(x) + w_s · Σ_i c_i B_i(x)
//! ```
//!
//! where `B_i` are B-spline basis functions on a fixed uniform grid. A layer
//! sums the edge functions into each output node; the D-KAN block composes
//! three layers and maps `R^w → R^w`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal_tensor, uniform_tensor, Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// `x / (1 + e^{-x})`
#[inline]
pub fn silu(x: f64) -> f64 {
    x * crate::tensor::sigmoid(x)
}

#[inline]
pub fn silu_derivative(x: f64) -> f64 {
    let s = crate::tensor::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Uniform knot vector on `[min, max]` with `degree` extra knots past each
/// end, giving `intervals + degree` basis functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub min: f64,
    pub max: f64,
    pub intervals: usize,
    pub degree: usize,
}

impl Default for SplineGrid {
    fn default() -> Self {
        SplineGrid {
            min: -1.0,
            max: 1.0,
            intervals: 5,
            degree: 3,
        }
    }
}

impl SplineGrid {
    pub fn new(min: f64, max: f64, intervals: usize, degree: usize) -> Result<Self> {
        let g = SplineGrid {
            min,
            max,
            intervals,
            degree,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::contract(format!(
                "degenerate spline domain [{}, {}]",
                self.min, self.max
            )));
        }
        if self.intervals == 0 {
            return Err(Error::contract("spline grid needs at least one interval"));
        }
        Ok(())
    }

    pub fn basis_count(&self) -> usize {
        self.intervals + self.degree
    }

    fn step(&self) -> f64 {
        (self.max - self.min) / self.intervals as f64
    }

    /// `intervals + 2·degree + 1` non-decreasing knots.
    pub fn knots(&self) -> Vec<f64> {
        let p = self.degree as isize;
        let h = self.step();
        let n = self.intervals + 2 * self.degree + 1;
        (0..n)
            .map(|j| {
                let j = j as isize;
                if j == p {
                    self.min
                } else if j == p + self.intervals as isize {
                    self.max
                } else {
                    self.min + (j - p) as f64 * h
                }
            })
            .collect()
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }

    /// Index `s` of the knot span `[t_s, t_{s+1})` holding a clamped `x`;
    /// the right end of the domain belongs to the last span.
    fn span(&self, knots: &[f64], x: f64) -> usize {
        let p = self.degree;
        let last = p + self.intervals - 1;
        let guess = ((x - self.min) / self.step()).floor();
        let mut s = if guess.is_finite() && guess > 0.0 { p + (guess as usize).min(self.intervals - 1) } else { p };
        while s > p && x < knots[s] {
            s -= 1;
        }
        while s < last && x >= knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Basis values at `x` (clamped to the domain) written into `out`,
    /// and optionally `d/dx` into `deriv` (zero outside the domain).
    pub fn eval_into(&self, knots: &[f64], x: f64, out: &mut [f64], deriv: Option<&mut [f64]>) {
        let p = self.degree;
        let xc = self.clamp(x);
        let s = self.span(knots, xc);
        out.iter_mut().for_each(|v| *v = 0.0);
        // triangular Cox–de Boor on the p+1 non-zero functions
        let mut n = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        assert!(p < 15, "spline degree too large");
        n[0] = 1.0;
        let mut lower = [0.0f64; 16];
        for j in 1..=p {
            if j == p {
                lower[..p].copy_from_slice(&n[..p]);
            }
            left[j] = xc - knots[s + 1 - j];
            right[j] = knots[s + j] - xc;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = n[r] / denom;
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let first = s - p;
        out[first..=s].copy_from_slice(&n[..=p]);
        if let Some(d) = deriv {
            d.iter_mut().for_each(|v| *v = 0.0);
            let inside = x >= self.min && x <= self.max;
            if p > 0 && inside {
                // degree p-1 functions N_{s-p+1..=s}, stored in lower[0..p]
                for r in 0..=p {
                    let i = first + r;
                    let a = if r >= 1 {
                        let den = knots[i + p] - knots[i];
                        if den > 0.0 { p as f64 * lower[r - 1] / den } else { 0.0 }
                    } else {
                        0.0
                    };
                    let b = if r < p {
                        let den = knots[i + p + 1] - knots[i + 1];
                        if den > 0.0 { p as f64 * lower[r] / den } else { 0.0 }
                    } else {
                        0.0
                    };
                    d[i] = a - b;
                }
            }
        }
    }
}

/// All `G + p` basis values at `x`.
pub fn bspline_basis(x: f64, grid: &SplineGrid) -> Result<Vec<f64>> {
    grid.validate()?;
    if !x.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            detail: format!("bspline input {x}"),
        });
    }
    let knots = grid.knots();
    let mut out = vec![0.0; grid.basis_count()];
    grid.eval_into(&knots, x, &mut out, None);
    Ok(out)
}

/// One edge activation `w_b·silu(x) + w_s·Σ c_i B_i(x)`.
pub fn phi_activation(x: f64, w_base: f64, w_spline: f64, coefs: &[f64], grid: &SplineGrid) -> Result<f64> {
    if coefs.len() != grid.basis_count() {
        return Err(Error::shape("phi_activation", &[coefs.len()], &[grid.basis_count()]));
    }
    let basis = bspline_basis(x, grid)?;
    let spline: f64 = coefs.iter().zip(&basis).map(|(c, b)| c * b).sum();
    Ok(w_base * silu(x) + w_spline * spline)
}

/// Parameters of one KAN layer, laid out output-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayerParams {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_out × n_in × (G+p)`
    pub coefs: Vec<f64>,
    /// `n_out × n_in`
    pub w_base: Vec<f64>,
    /// `n_out × n_in`
    pub w_spline: Vec<f64>,
    pub grid: SplineGrid,
}

impl KanLayerParams {
    pub fn zeros(n_in: usize, n_out: usize, grid: SplineGrid) -> Self {
        let nb = grid.basis_count();
        KanLayerParams {
            n_in,
            n_out,
            coefs: vec![0.0; n_out * n_in * nb],
            w_base: vec![0.0; n_out * n_in],
            w_spline: vec![0.0; n_out * n_in],
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.grid.basis_count();
        if self.coefs.len() != self.n_out * self.n_in * nb {
            return Err(Error::shape("kan coefficients", &[self.coefs.len()], &[self.n_out, self.n_in, nb]));
        }
        if self.w_base.len() != self.n_out * self.n_in || self.w_spline.len() != self.n_out * self.n_in {
            return Err(Error::shape("kan weights", &[self.w_base.len(), self.w_spline.len()], &[self.n_out, self.n_in]));
        }
        Ok(())
    }

    pub fn edge_coefs(&self, q: usize, n: usize) -> &[f64] {
        let nb = self.grid.basis_count();
        let base = (q * self.n_in + n) * nb;
        &self.coefs[base..base + nb]
    }

    /// Reads a layer stored under `prefix` in a parameter store.
    pub fn from_store(store: &ParamStore, prefix: &str, grid: &SplineGrid) -> Result<Self> {
        let coefs = store.get(&format!("{prefix}.coef"))?;
        let s = coefs.shape();
        let p = KanLayerParams {
            n_out: s[0],
            n_in: s[1],
            coefs: coefs.data().to_vec(),
            w_base: store.get(&format!("{prefix}.w_base"))?.data().to_vec(),
            w_spline: store.get(&format!("{prefix}.w_spline"))?.data().to_vec(),
            grid: grid.clone(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// `out[q] = Σ_n φ_{q,n}(x[n])`
pub fn kan_layer(x: &[f64], params: &KanLayerParams) -> Result<Vec<f64>> {
    params.validate()?;
    if x.len() != params.n_in {
        return Err(Error::shape("kan_layer", &[x.len()], &[params.n_in]));
    }
    let nb = params.grid.basis_count();
    let knots = params.grid.knots();
    let mut basis = vec![0.0; params.n_in * nb];
    for (n, &xn) in x.iter().enumerate() {
        params.grid.eval_into(&knots, xn, &mut basis[n * nb..(n + 1) * nb], None);
    }
    let act: Vec<f64> = x.iter().map(|&v| silu(v)).collect();
    let mut out = vec![0.0; params.n_out];
    for (q, o) in out.iter_mut().enumerate() {
        for n in 0..params.n_in {
            let e = q * params.n_in + n;
            let spline: f64 = params.edge_coefs(q, n).iter().zip(&basis[n * nb..(n + 1) * nb]).map(|(c, b)| c * b).sum();
            *o += params.w_base[e] * act[n] + params.w_spline[e] * spline;
        }
    }
    Ok(out)
}

/// Parameter names for a layer stored under `prefix`.
pub fn layer_names(prefix: &str) -> [String; 3] {
    [format!("{prefix}.coef"), format!("{prefix}.w_base"), format!("{prefix}.w_spline")]
}

/// Initialises a layer in `store`: fan-in uniform base weights, unit
/// spline weights and small Gaussian coefficients.
pub fn init_layer(store: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, grid: &SplineGrid, rng: &mut impl Rng) -> Result<()> {
    let nb = grid.basis_count();
    let [c, wb, ws] = layer_names(prefix);
    store.insert(c, normal_tensor(rng, &[n_out, n_in, nb], 0.1 / nb as f64))?;
    store.insert(wb, uniform_tensor(rng, &[n_out, n_in], (3.0 / n_in as f64).sqrt()))?;
    store.insert(ws, Tensor::ones(&[n_out, n_in]))?;
    Ok(())
}

/// Graph version of [`kan_layer`] applied to every row of `x: R × n_in`.
pub fn kan_layer_graph(g: &mut Graph, p: &mut Binder, prefix: &str, grid: &SplineGrid, x: Var) -> Result<Var> {
    let [cn, wbn, wsn] = layer_names(prefix);
    let coef = p.var(g, &cn)?;
    let w_base = p.var(g, &wbn)?;
    let w_spline = p.var(g, &wsn)?;
    let cs = g.shape(coef).to_vec();
    let (n_out, n_in, nb) = (cs[0], cs[1], cs[2]);
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != n_in {
        return Err(Error::shape("kan_layer", &xs, &[n_in]));
    }
    let rows = xs[0];

    let act = g.silu(x);
    let wb_t = g.transpose(w_base)?;
    let base = g.matmul(act, wb_t)?;

    let knots = grid.knots();
    let basis = g.map_expand(x, nb, |xv, vals, ders| grid.eval_into(&knots, xv, vals, Some(ders)));
    let basis = g.reshape(basis, &[rows, n_in * nb])?;
    let ws3 = g.reshape(w_spline, &[n_out, n_in, 1])?;
    let eff = g.mul(coef, ws3)?;
    let eff = g.reshape(eff, &[n_out, n_in * nb])?;
    let eff_t = g.transpose(eff)?;
    let spline = g.matmul(basis, eff_t)?;
    g.add(base, spline)
}

/// Widths of a D-KAN block: `width → hidden[0] → hidden[1] → width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DKanSpec {
    pub width: usize,
    pub hidden: [usize; 2],
    pub grid: SplineGrid,
}

impl DKanSpec {
    pub fn layer_widths(&self) -> [(usize, usize); 3] {
        [(self.width, self.hidden[0]), (self.hidden[0], self.hidden[1]), (self.hidden[1], self.width)]
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        for (l, (i, o)) in self.layer_widths().into_iter().enumerate() {
            init_layer(store, &format!("{prefix}.{l}"), i, o, &self.grid, rng)?;
        }
        Ok(())
    }

    /// Three composed layers on every row of `x: R × width`.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.width {
            return Err(Error::shape("dkan_block", s, &[self.width]));
        }
        let mut h = x;
        for l in 0..3 {
            h = kan_layer_graph(g, p, &format!("{prefix}.{l}"), &self.grid, h)?;
        }
        Ok(h)
    }

    pub fn layers_from_store(&self, store: &ParamStore, prefix: &str) -> Result<[KanLayerParams; 3]> {
        Ok([
            KanLayerParams::from_store(store, &format!("{prefix}.0"), &self.grid)?,
            KanLayerParams::from_store(store, &format!("{prefix}.1"), &self.grid)?,
            KanLayerParams::from_store(store, &format!("{prefix}.2"), &self.grid)?,
        ])
    }
}

/// `(Φ₃ ∘ Φ₂ ∘ Φ₁)(x)` on plain vectors.
pub fn dkan_block(x: &[f64], layers: &[KanLayerParams; 3]) -> Result<Vec<f64>> {
    if x.len() != layers[0].n_in || layers[2].n_out != layers[0].n_in {
        return Err(Error::shape("dkan_block", &[x.len()], &[layers[0].n_in, layers[2].n_out]));
    }
    let h1 = kan_layer(x, &layers[0])?;
    let h2 = kan_layer(&h1, &layers[1])?;
    kan_layer(&h2, &layers[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((silu(30.0) - 30.0).abs() < 1e-11);
    }

    #[test]
    fn degree_zero_is_indicator() {
        let g = SplineGrid::new(-1.0, 1.0, 4, 0).unwrap();
        for &x in &[-1.0, -0.6, 0.0, 0.49, 1.0] {
            let b = bspline_basis(x, &g).unwrap();
            assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 1, "x={x}");
            assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), 3);
        }
    }

    #[test]
    fn partition_of_unity_cubic() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        for i in 0..=200 {
            let x = -1.0 + 2.0 * i as f64 / 200.0;
            let s: f64 = bspline_basis(x, &g).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
        }
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(SplineGrid::new(1.0, 1.0, 5, 3).is_err());
        let bad = SplineGrid { min: 2.0, max: 1.0, intervals: 3, degree: 2 };
        assert!(matches!(bspline_basis(0.0, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn knot_layout() {
        let g = SplineGrid::default();
        let k = g.knots();
        assert_eq!(k.len(), 5 + 2 * 3 + 1);
        assert!(k.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(k[3], -1.0);
        assert_eq!(k[8], 1.0);
        assert_eq!(g.basis_count(), 8);
    }

    #[test]
    fn phi_special_cases() {
        let g = SplineGrid::default();
        let coefs: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        for &x in &[-0.8, 0.1, 0.77] {
            assert_eq!(phi_activation(x, 1.7, 0.0, &coefs, &g).unwrap(), 1.7 * silu(x));
            let flat = vec![0.35; 8];
            let v = phi_activation(x, 0.0, 2.0, &flat, &g).unwrap();
            assert!((v - 0.7).abs() < 1e-12);
        }
        assert!(matches!(phi_activation(0.0, 1.0, 1.0, &[1.0], &g), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_layer_and_single_input() {
        let g = SplineGrid::default();
        let z = KanLayerParams::zeros(3, 2, g.clone());
        assert_eq!(kan_layer(&[0.3, -0.2, 0.9], &z).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(kan_layer(&[0.3], &z), Err(Error::Shape { .. })));

        let mut one = KanLayerParams::zeros(1, 2, g.clone());
        one.w_base = vec![0.5, -1.0];
        one.w_spline = vec![1.0, 2.0];
        for (i, c) in one.coefs.iter_mut().enumerate() {
            *c = (i as f64 * 0.71).sin();
        }
        let out = kan_layer(&[0.4], &one).unwrap();
        for q in 0..2 {
            let phi = phi_activation(0.4, one.w_base[q], one.w_spline[q], one.edge_coefs(q, 0), &g).unwrap();
            assert_eq!(out[q], phi);
        }
    }

    #[test]
    fn derivative_outside_domain_is_zero() {
        let g = SplineGrid::default();
        let k = g.knots();
        let mut v = vec![0.0; 8];
        let mut d = vec![1.0; 8];
        g.eval_into(&k, 3.0, &mut v, Some(&mut d));
        assert!(d.iter().all(|&x| x == 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
