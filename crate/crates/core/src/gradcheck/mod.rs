//! Central finite-difference gradient verification.
//!
//! The analytic gradient comes from [`Graph::backward`] at the precision under
//! test; the numeric gradient is always recomputed with a 64-bit forward pass,
//! so the check is independent of the backward rules it validates.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, Real, Tensor, Var};

/// A scalar function of several tensors, buildable at any precision.
pub trait ScalarFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Relative-error bound for the analytic gradient at this precision.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub precision: Precision,
    /// Worst relative error over all checked inputs.
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.precision.tolerance()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// At most this many coordinates per input are perturbed.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 24,
            seed: 0,
        }
    }
}

fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    Ok(g.data(out).iter().sum())
}

fn analytic<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = f.build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// Checks every input of `f` at `inputs`. Inputs are first rounded to `f32`
/// so both precisions are evaluated at the same point.
pub fn check<F: ScalarFn>(
    name: &str,
    f: &F,
    inputs: &[Tensor<f64>],
    precision: Precision,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let point: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<f32>().cast::<f64>()).collect();
    let grads = match precision {
        Precision::F32 => analytic::<f32, F>(f, &point)?,
        Precision::F64 => analytic::<f64, F>(f, &point)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, t) in point.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &c in &coords {
            let mut probe = point.clone();
            let x0 = probe[i].data()[c];
            probe[i].data_mut()[c] = x0 + opts.step;
            let up = eval_f64(f, &probe)?;
            probe[i].data_mut()[c] = x0 - opts.step;
            let down = eval_f64(f, &probe)?;
            let num = (up - down) / (2.0 * opts.step);
            let ana = grads[i][c];
            diff2 += (ana - num).powi(2);
            a2 += ana * ana;
            n2 += num * num;
        }
        checked += coords.len();
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-10 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / scale
        };
        worst = worst.max(rel);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        precision,
        max_rel_err: worst,
        checked,
    })
}
