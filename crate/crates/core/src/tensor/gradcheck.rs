//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Gradients, Graph, NodeId, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Total coordinates to sample; every tensor gets at least one.
    pub samples: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is numerically zero are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-3,
            samples: 200,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic value and numeric value of the worst coordinate.
    pub worst: (usize, f64, f64),
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coordinates(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn entry(&self, name: &str) -> Option<&TensorCheck> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// One line per tensor: `name checked max_rel_error PASS|FAIL`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{:<40} {:>5} {:>12.3e} {}\n",
                e.name,
                e.checked,
                e.max_rel_error,
                if e.passed { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "max_rel_error {:.3e} over {} coordinates (tol {:.1e})\n",
            self.max_rel_error(),
            self.coordinates(),
            self.tol
        ));
        s
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `f` at sampled
/// coordinates of every tensor in `store`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = store.num_scalars().max(1);
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let len = store.get(id).len();
        let share = (cfg.samples * len).div_ceil(total);
        let k = share.clamp(1, len);
        let coords = sample(&mut rng, len, k).into_vec();
        let mut worst = (0usize, 0.0, 0.0);
        let mut max_err = 0.0f64;
        for &c in &coords {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let n = central_difference(&mut work, id, c, cfg.eps, &mut f)?;
            let e = rel_error(a, n, cfg.floor);
            if e > max_err || coords.len() == 1 {
                max_err = max_err.max(e);
                worst = (c, a, n);
            }
        }
        entries.push(TensorCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: max_err,
            worst,
            passed: max_err < cfg.tol,
        });
    }
    Ok(GradCheckReport {
        tol: cfg.tol,
        entries,
    })
}

fn central_difference<F>(
    work: &mut ParamStore<f64>,
    id: ParamId,
    c: usize,
    eps: f64,
    f: &mut F,
) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let orig = work.get(id).data()[c];
    work.get_mut(id).data_mut()[c] = orig + eps;
    let up = f(work)?;
    work.get_mut(id).data_mut()[c] = orig - eps;
    let down = f(work)?;
    work.get_mut(id).data_mut()[c] = orig;
    Ok((up - down) / (2.0 * eps))
}

/// Build the loss graph once for analytic gradients, then check them.
pub fn check_gradients<F>(store: &ParamStore<f64>, mut loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let analytic = g.backward_params(l, store)?;
    grad_check(
        store,
        &analytic,
        |p| {
            let mut g = Graph::new();
            let l = loss(&mut g, p)?;
            Ok(g.scalar(l))
        },
        cfg,
    )
}
