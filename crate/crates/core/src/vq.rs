//! Vector quantization of style features against a learned codebook.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

/// Weight of the commitment term in the VQ objective.
pub const COMMITMENT_WEIGHT: f64 = 0.25;
/// Update calls a codeword may go unused before it is re-seeded.
pub const DEAD_CODE_STEPS: u32 = 200;
const RESEED_NOISE: f64 = 0.01;

/// `K x H` embeddings held in a [`ParamStore`] plus usage bookkeeping.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub embeddings: ParamId,
    pub size: usize,
    pub dim: usize,
    pub usage_counts: Vec<u64>,
    idle_steps: Vec<u32>,
}

impl Codebook {
    /// Codewords drawn from `N(0, init_std^2)`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, size: usize, dim: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Parameter("codebook size and dimension must be positive".into()));
        }
        let init = Tensor::standard_normal(&[size, dim], rng).map(|v| v * init_std);
        Ok(Self::from_store(store.add(format!("{name}.embeddings"), init), size, dim))
    }

    /// Codebook over fixed, caller-provided vectors.
    pub fn from_tensor(store: &mut ParamStore, name: &str, init: Tensor) -> Result<Self> {
        let (size, dim) = init.dims2();
        if init.rank() != 2 || size == 0 {
            return Err(Error::Parameter("codebook needs a nonempty [K, H] matrix".into()));
        }
        Ok(Self::from_store(store.add(format!("{name}.embeddings"), init), size, dim))
    }

    fn from_store(embeddings: ParamId, size: usize, dim: usize) -> Self {
        Self {
            embeddings,
            size,
            dim,
            usage_counts: vec![0; size],
            idle_steps: vec![0; size],
        }
    }

    pub fn idle_steps(&self) -> &[u32] {
        &self.idle_steps
    }

    pub fn write_counters(&self, ck: &mut Checkpoint, prefix: &str) {
        let usage = self.usage_counts.iter().map(|&c| c as f64).collect();
        let idle = self.idle_steps.iter().map(|&c| c as f64).collect();
        ck.insert(format!("{prefix}.usage"), Tensor::new(&[self.size], usage).expect("size > 0"));
        ck.insert(format!("{prefix}.idle"), Tensor::new(&[self.size], idle).expect("size > 0"));
    }

    pub fn read_counters(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let usage = ck.require(&format!("{prefix}.usage"))?;
        let idle = ck.require(&format!("{prefix}.idle"))?;
        if usage.len() != self.size || idle.len() != self.size {
            return Err(Error::Config(format!(
                "codebook counters have {} entries, expected {}",
                usage.len(),
                self.size
            )));
        }
        self.usage_counts = usage.data().iter().map(|&v| v as u64).collect();
        self.idle_steps = idle.data().iter().map(|&v| v as u32).collect();
        Ok(())
    }
}

/// Index of the nearest row of `codebook` for every row of `z`; ties go to
/// the lowest index.
pub fn nearest_codewords(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    let (_, h) = z.dims2();
    let (k, hc) = codebook.dims2();
    if h != hc {
        return Err(Error::Contract(format!(
            "feature dimension {h} does not match codebook dimension {hc}"
        )));
    }
    let out = (0..z.rows())
        .map(|r| {
            let x = z.row(r);
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let d: f64 = x.iter().zip(codebook.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect();
    Ok(out)
}

/// Result of quantizing one sequence on a tape.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Selected codewords; gradients pass straight through to `z_e`.
    pub z_q: Var,
    pub indices: Vec<usize>,
    /// Mean over frames of `||z_e - sg[z_q]||^2`.
    pub commitment: Var,
    /// Mean over frames of `||sg[z_e] - z_q||^2`; only the codebook learns from it.
    pub codebook_loss: Var,
}

impl Quantized {
    /// `codebook_loss + 0.25 * commitment`.
    pub fn objective(&self, g: &mut Graph) -> Result<Var> {
        let c = g.scale(self.commitment, COMMITMENT_WEIGHT);
        g.add(self.codebook_loss, c)
    }
}

pub fn quantize(g: &mut Graph, store: &ParamStore, cb: &Codebook, z_e: Var) -> Result<Quantized> {
    let table = g.param(store, cb.embeddings);
    let indices = nearest_codewords(g.value(z_e), g.value(table))?;
    let h = cb.dim as f64;
    let selected = g.embedding(table, &indices)?;
    let selected_value = g.value(selected).clone();

    let sg_q = g.constant(selected_value.clone());
    let commitment = g.mse(z_e, sg_q)?;
    let commitment = g.scale(commitment, h);

    let sg_e = g.detach(z_e);
    let codebook_loss = g.mse(sg_e, selected)?;
    let codebook_loss = g.scale(codebook_loss, h);

    let z_q = g.straight_through(z_e, selected_value)?;
    Ok(Quantized {
        z_q,
        indices,
        commitment,
        codebook_loss,
    })
}

/// Bookkeeping after an optimizer step: counts usage and re-seeds codewords
/// idle for [`DEAD_CODE_STEPS`] consecutive calls to a random vector of the
/// batch plus small Gaussian noise. Returns the re-seeded indices.
pub fn codebook_update<R: Rng>(
    cb: &mut Codebook,
    store: &mut ParamStore,
    batch: &Tensor,
    indices: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch.rows() != indices.len() {
        return Err(Error::Contract(format!(
            "{} indices for a batch of {} vectors",
            indices.len(),
            batch.rows()
        )));
    }
    if batch.cols() != cb.dim {
        return Err(Error::Contract(format!(
            "batch dimension {} does not match codebook dimension {}",
            batch.cols(),
            cb.dim
        )));
    }
    let mut used = vec![false; cb.size];
    for &i in indices {
        if i >= cb.size {
            return Err(Error::Index { index: i, max: cb.size - 1 });
        }
        used[i] = true;
        cb.usage_counts[i] += 1;
    }
    let noise = Normal::new(0.0, RESEED_NOISE).expect("positive std");
    let mut reseeded = Vec::new();
    for j in 0..cb.size {
        if used[j] {
            cb.idle_steps[j] = 0;
            continue;
        }
        cb.idle_steps[j] += 1;
        if cb.idle_steps[j] >= DEAD_CODE_STEPS {
            let src = rng.random_range(0..batch.rows());
            let row: Vec<f64> = batch.row(src).iter().map(|v| v + noise.sample(rng)).collect();
            store.get_mut(cb.embeddings).row_mut(j).copy_from_slice(&row);
            cb.idle_steps[j] = 0;
            reseeded.push(j);
        }
    }
    Ok(reseeded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[Vec<f64>]) -> (ParamStore, Codebook) {
        let mut store = ParamStore::new();
        let cb = Codebook::from_tensor(&mut store, "vq", Tensor::from_rows(rows).unwrap()).unwrap();
        (store, cb)
    }

    #[test]
    fn two_codeword_example() {
        let (store, cb) = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&[vec![0.2, 0.1]]).unwrap(), true);
        let q = quantize(&mut g, &store, &cb, z).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert!((g.value(q.commitment).item() - 0.05).abs() < 1e-12);
        assert!((g.value(q.codebook_loss).item() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn exact_codeword_has_zero_commitment() {
        let (store, cb) = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap(), true);
        let q = quantize(&mut g, &store, &cb, z).unwrap();
        assert_eq!(g.value(q.commitment).item(), 0.0);
        assert_eq!(q.indices, vec![1, 0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut rows = vec![vec![10.0, 10.0]; 8];
        rows[3] = vec![1.0, 0.0];
        rows[7] = vec![-1.0, 0.0];
        let (store, cb) = book(&rows);
        let idx = nearest_codewords(&Tensor::from_rows(&[vec![0.0, 5.0]]).unwrap(), store.get(cb.embeddings)).unwrap();
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let (store, cb) = book(&[vec![0.0, 0.0]]);
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(matches!(quantize(&mut g, &store, &cb, z), Err(Error::Contract(_))));
    }

    #[test]
    fn only_assigned_codeword_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, "vq", 6, 3, 1.0, &mut rng).unwrap();
        let target = store.get(cb.embeddings).row(0).to_vec();
        let z: Vec<Vec<f64>> = (0..5).map(|i| target.iter().map(|v| v + 0.01 * i as f64).collect()).collect();
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&z).unwrap(), true);
        let q = quantize(&mut g, &store, &cb, z).unwrap();
        assert!(q.indices.iter().all(|&i| i == 0));
        let obj = q.objective(&mut g).unwrap();
        g.backward(obj).unwrap();
        let grads = g.param_grads();
        let grad = &grads[0].1;
        assert!(grad[..3].iter().any(|v| *v != 0.0));
        assert!(grad[3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_code_reseeded_after_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut store, mut cb) = book(&[vec![0.0, 0.0], vec![50.0, 50.0]]);
        let batch = Tensor::from_rows(&[vec![0.1, 0.1], vec![-0.1, 0.0]]).unwrap();
        for step in 1..=DEAD_CODE_STEPS {
            let r = codebook_update(&mut cb, &mut store, &batch, &[0, 0], &mut rng).unwrap();
            if step < DEAD_CODE_STEPS {
                assert!(r.is_empty(), "early re-seed at {step}");
                assert_eq!(cb.idle_steps()[1], step);
            } else {
                assert_eq!(r, vec![1]);
            }
        }
        let moved = store.get(cb.embeddings).row(1);
        assert!(moved.iter().all(|v| v.abs() < 0.2));
        assert_eq!(cb.usage_counts, vec![2 * DEAD_CODE_STEPS as u64, 0]);
    }

    /// Lloyd iterations to a fixed point.
    fn kmeans(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        for _ in 0..100 {
            let mut sums = vec![vec![0.0; 2]; centers.len()];
            let mut counts = vec![0usize; centers.len()];
            for p in points {
                let j = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da: f64 = p.iter().zip(&centers[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = p.iter().zip(&centers[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                counts[j] += 1;
                sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            }
            for j in 0..centers.len() {
                if counts[j] > 0 {
                    centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                }
            }
        }
        centers
    }

    #[test]
    fn converges_to_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let points: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let c = if i % 2 == 0 { [-2.0, 0.5] } else { [1.5, -1.0] };
                vec![c[0] + normal.sample(&mut rng), c[1] + normal.sample(&mut rng)]
            })
            .collect();
        let oracle = kmeans(&points, vec![points[0].clone(), points[1].clone()]);

        let mut store = ParamStore::new();
        let mut cb = Codebook::new(&mut store, "vq", 2, 2, 0.5, &mut rng).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.02, ..Default::default() });
        for step in 0..1500 {
            let batch: Vec<Vec<f64>> = (0..64).map(|i| points[(step * 64 + i) % points.len()].clone()).collect();
            let batch = Tensor::from_rows(&batch).unwrap();
            let mut g = Graph::new();
            let z = g.constant(batch.clone());
            let q = quantize(&mut g, &store, &cb, z).unwrap();
            let obj = q.objective(&mut g).unwrap();
            g.backward(obj).unwrap();
            adam.step(&mut store, &g.param_grads()).unwrap();
            codebook_update(&mut cb, &mut store, &batch, &q.indices, &mut rng).unwrap();
        }
        let e = store.get(cb.embeddings);
        for center in &oracle {
            let best = (0..2)
                .map(|j| e.row(j).iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05, "codeword {best} away from {center:?}");
        }
    }
}
