//! Central finite-difference gradient checking (f64).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Relative step: `h = step * max(|p|, 0.1)`.
    pub step: f64,
    /// Coordinates probed per group; `None` probes every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    /// `max |analytic - numeric| / max |numeric|` over the probed coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares `analytic` gradients of `loss` at `point` with central differences.
///
/// `point` holds one flat buffer per named group; it is perturbed in place
/// and restored before returning.
pub fn grad_check(
    names: &[String],
    point: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    mut loss: impl FnMut(&[Vec<f64>]) -> f64,
    opts: GradCheckOpts,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::with_capacity(point.len());
    for g in 0..point.len() {
        let len = point[g].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut max_abs: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for &i in &coords {
            let orig = point[g][i];
            let h = opts.step * orig.abs().max(0.1);
            point[g][i] = orig + h;
            let up = loss(point);
            point[g][i] = orig - h;
            let down = loss(point);
            point[g][i] = orig;
            let num = (up - down) / (2.0 * h);
            max_abs = max_abs.max((num - analytic[g][i]).abs());
            max_num = max_num.max(num.abs()).max(analytic[g][i].abs());
        }
        let rel = if max_num > 0.0 { max_abs / max_num } else { max_abs };
        groups.push(GroupReport {
            name: names.get(g).cloned().unwrap_or_else(|| format!("group{g}")),
            max_rel_err: rel,
            max_abs_err: max_abs,
            checked: coords.len(),
        });
    }
    GradCheckReport { groups }
}

/// Checks the input gradient of a tensor op through the scalar `<op(x), probe>`.
pub fn check_op(
    x: &Tensor<f64>,
    probe: &Tensor<f64>,
    forward: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    opts: GradCheckOpts,
) -> GradCheckReport {
    let analytic = backward(x, probe).into_data();
    let shape = x.shape();
    let mut point = vec![x.data().to_vec()];
    grad_check(
        &["input".to_string()],
        &mut point,
        &[analytic],
        |p| {
            let t = Tensor::new(shape, p[0].clone()).expect("shape preserved");
            forward(&t).dot(probe).expect("probe shape")
        },
        opts,
    )
}
