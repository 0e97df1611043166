//! Central finite-difference checking of analytic gradients.
//!
//! The numeric side never touches the tape's backward rules: it only re-evaluates
//! the objective with one coordinate nudged by `+-step`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub rtol: f64,
    /// Coordinates sampled per checked tensor.
    pub samples: usize,
    /// Gradient magnitude below which the error is measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, rtol: 1e-3, samples: 10, floor: 1e-1, seed: 7 }
    }
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
    }

    pub fn prefixed(mut self, prefix: &str) -> Self {
        for g in &mut self.groups {
            g.name = format!("{prefix}/{}", g.name);
        }
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<44} {:>4} probes  max rel err {:.3e}  {}\n",
                g.name,
                g.checked,
                g.max_rel_err,
                if g.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Relative error with an absolute floor. The floor stops coordinates whose true
/// gradient is at the f32 rounding level from dominating the report.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check `analytic[i]` against central differences of `f` at `inputs`.
///
/// `f` should accumulate its scalar in `f64` so the difference quotient is not
/// dominated by rounding of the objective itself.
pub fn check<F>(
    names: &[&str],
    inputs: &mut [Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    assert_eq!(inputs.len(), analytic.len());
    assert_eq!(inputs.len(), names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let floor = cfg.floor;
    let mut report = GradCheckReport::default();
    for t in 0..inputs.len() {
        let n = inputs[t].len();
        let coords: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel = 0.0f64;
        let mut worst = None;
        for &i in &coords {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + cfg.step;
            let fp = f(inputs)?;
            inputs[t].data_mut()[i] = orig - cfg.step;
            let fm = f(inputs)?;
            inputs[t].data_mut()[i] = orig;
            // Use the actually representable perturbation width.
            let width = ((orig + cfg.step) as f64) - ((orig - cfg.step) as f64);
            let numeric = (fp - fm) / width;
            let a = analytic[t].data()[i] as f64;
            let e = rel_err(a, numeric, floor);
            if e >= max_rel {
                max_rel = e;
                worst = Some((i, a, numeric));
            }
        }
        report.groups.push(GroupResult {
            name: names[t].to_string(),
            checked: coords.len(),
            max_rel_err: max_rel,
            worst,
            passed: max_rel <= cfg.rtol,
        });
    }
    Ok(report)
}

/// Check each tensor of `analytic` along `cfg.samples` directions instead of single
/// coordinates. Each direction is the unit gradient plus an independent random unit
/// vector, renormalised, so the directional derivative stays well above the f32
/// rounding of large objectives while still probing components off the gradient.
/// The analytic side is `g . (x+ - x-) / 2h` over the perturbations actually stored.
pub fn check_directional<F>(
    names: &[&str],
    inputs: &mut [Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    use rand::Rng;
    assert_eq!(inputs.len(), analytic.len());
    assert_eq!(inputs.len(), names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for t in 0..inputs.len() {
        let n = inputs[t].len();
        let g: Vec<f64> = analytic[t].data().iter().map(|&v| v as f64).collect();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let orig = inputs[t].data().to_vec();
        let mut max_rel = 0.0f64;
        let mut worst = None;
        for k in 0..cfg.samples {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0f64..1.0)).collect();
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut dir: Vec<f64> = (0..n)
                .map(|i| r[i] / rnorm + if gnorm > 0.0 { g[i] / gnorm } else { 0.0 })
                .collect();
            let dnorm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v /= dnorm);
            let h = cfg.step as f64;
            let plus: Vec<f32> = (0..n).map(|i| (orig[i] as f64 + h * dir[i]) as f32).collect();
            let minus: Vec<f32> = (0..n).map(|i| (orig[i] as f64 - h * dir[i]) as f32).collect();
            inputs[t].data_mut().copy_from_slice(&plus);
            let fp = f(inputs)?;
            inputs[t].data_mut().copy_from_slice(&minus);
            let fm = f(inputs)?;
            inputs[t].data_mut().copy_from_slice(&orig);
            let numeric = (fp - fm) / (2.0 * h);
            let a = (0..n).map(|i| g[i] * (plus[i] as f64 - minus[i] as f64)).sum::<f64>() / (2.0 * h);
            let e = rel_err(a, numeric, cfg.floor);
            if e >= max_rel {
                max_rel = e;
                worst = Some((k, a, numeric));
            }
        }
        report.groups.push(GroupResult {
            name: names[t].to_string(),
            checked: cfg.samples,
            max_rel_err: max_rel,
            worst,
            passed: max_rel <= cfg.rtol,
        });
    }
    Ok(report)
}

/// Deterministic pseudo-random projection weights, used to turn a tensor-valued
/// op into a scalar objective for checking.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// `sum(w * y)` accumulated in `f64`.
pub fn project(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Check `op` w.r.t. every input, using the objective `sum(w * op(x))` with fixed
/// random weights `w`. Groups are named `<name>/in<i>`.
pub fn check_op<F>(name: &str, inputs: Vec<Tensor>, cfg: &GradCheckConfig, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor], grad: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.input(x.clone(), grad)).collect::<Result<Vec<_>>>()?;
        let y = op(&mut tape, &vars)?;
        Ok((tape, vars, y))
    };
    let (tape, vars, y) = run(&inputs, true)?;
    let w = probe(tape.shape(y), cfg.seed ^ 0x9e37);
    let adj = tape.backward_seeded(&[(y, w.clone())])?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, x)| adj.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("{name}/in{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut xs = inputs;
    check(&names, &mut xs, &analytic, cfg, |xs| {
        let (tape, _, y) = run(xs, false)?;
        Ok(project(tape.value(y), &w))
    })
}

/// Check the gradient of the scalar built by `loss` w.r.t. the parameters `ids`,
/// one group per parameter, named after it.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    cfg: &GradCheckConfig,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.gradients(l)?.into_params();
    let names: Vec<String> = ids.iter().map(|&id| store.get(id).name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut values: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(&values)
        .map(|(&id, v)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    let mut scratch = store.clone();
    let report = check(&names, &mut values, &analytic, cfg, |vals| {
        for (&id, v) in ids.iter().zip(vals) {
            scratch.value_mut(id).data_mut().copy_from_slice(v.data());
        }
        let mut tape = Tape::new();
        let l = loss(&mut tape, &scratch)?;
        Ok(tape.value(l).data().iter().map(|&v| v as f64).sum())
    })?;
    Ok(report)
}
