//! Finite-difference gradient oracle and small fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use marginlab::autodiff::{Graph, NodeId};
use marginlab::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step of the five-point central stencil.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor: entries whose true gradient is below this are
/// compared absolutely at `tolerance × FLOOR`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero in magnitude.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min: f64, max: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(min..max);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values spaced `gap` apart whose magnitudes are also pairwise at least
/// `gap / 2` apart, in random order.
pub fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.25) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(build: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &ids).unwrap();
    g.value(root).item().unwrap()
}

/// Analytic gradients of the scalar `build` w.r.t. `params`.
pub fn analytic<F>(build: &F, params: &[Tensor]) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &ids).unwrap();
    g.backward(root).unwrap().collect(&g, &ids)
}

/// Five-point central differences of `build` w.r.t. every parameter entry.
pub fn numeric<F>(build: &F, params: &[Tensor]) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].numel()];
        for (i, gi) in grad.iter_mut().enumerate() {
            let x = params[p].data()[i];
            let mut f = |dx: f64| {
                work[p].data_mut()[i] = x + dx;
                eval(build, &work)
            };
            let h = FD_STEP;
            *gi = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
            work[p].data_mut()[i] = x;
        }
        out.push(Tensor::new(params[p].shape().to_vec(), grad).unwrap());
    }
    out
}

/// Worst elementwise relative error between analytic and numeric gradients.
pub fn max_rel_error<F>(build: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let a = analytic(&build, params);
    let n = numeric(&build, params);
    a.iter()
        .zip(&n)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| rel_err(x, y)))
        .fold(0.0, f64::max)
}

/// Asserts gradients match finite differences to `tol`.
pub fn assert_gradients<F>(name: &str, build: F, params: &[Tensor], tol: f64)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let err = max_rel_error(build, params);
    assert!(err < tol, "{name}: max relative error {err:e} ≥ {tol:e}");
}

/// Reduces a tensor node to a scalar through a fixed random projection, so
/// every output entry contributes a distinct weight.
pub fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Naive `[m×k]·[k×n]`.
pub fn matmul_loops(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `<workspace>/data`, unless `MARGINLAB_DATA_DIR` overrides it.
pub fn data_root() -> std::path::PathBuf {
    marginlab::data::data_dir(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// The MNIST directory; panics with fetch instructions when files are missing.
pub fn require_mnist() -> std::path::PathBuf {
    let dir = data_root().join("mnist");
    for f in marginlab::data::MNIST_FILES {
        assert!(
            dir.join(f).is_file(),
            "missing {}; run scripts/fetch_mnist.sh or set MARGINLAB_DATA_DIR",
            dir.join(f).display()
        );
    }
    dir
}
