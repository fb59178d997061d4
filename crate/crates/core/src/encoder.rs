//! Lifting condition from joint heatmaps.
//!
//! Each joint contributes `k` grid positions (the most probable cells, or
//! cells drawn in proportion to probability). A shared linear layer embeds
//! every joint's `2k` coordinates into `d` features, one graph
//! convolution `silu(A h W)` mixes joints through a learnable `J x J`
//! adjacency, and a final linear layer maps the flattened features to the
//! condition vector.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pose::{Heatmap, Skeleton, Standardizer};

/// `J x 2k` standardized positions: row `j` holds `x0, y0, x1, y1, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgumentSet {
    pub joints: usize,
    pub k: usize,
    pub z: Vec<f32>,
}

impl ArgumentSet {
    pub fn row(&self, joint: usize) -> &[f32] {
        &self.z[joint * 2 * self.k..(joint + 1) * 2 * self.k]
    }
}

/// Cell indices of the `k` largest values, largest first; ties go to the
/// earlier cell in row-major order.
pub fn topk_cells(heatmap: &Heatmap, k: usize) -> Result<Vec<usize>> {
    let n = heatmap.cells();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must be in 1..={n}")));
    }
    let v = &heatmap.values;
    let order = |a: &usize, b: &usize| v[*b].total_cmp(&v[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

pub(crate) fn assemble(heatmaps: &[Heatmap], cells: &[Vec<usize>], k: usize, norm: &Standardizer) -> ArgumentSet {
    let mut z = Vec::with_capacity(heatmaps.len() * 2 * k);
    for (h, cs) in heatmaps.iter().zip(cells) {
        for &c in cs {
            z.extend_from_slice(&norm.apply(h.position(c)));
        }
    }
    ArgumentSet {
        joints: heatmaps.len(),
        k,
        z,
    }
}

/// Top-`k` positions per joint, optionally shuffled per joint.
pub fn extract_topk<R: Rng + ?Sized>(
    heatmaps: &[Heatmap],
    k: usize,
    norm: &Standardizer,
    rng: &mut R,
    shuffle: bool,
) -> Result<ArgumentSet> {
    let mut cells = heatmaps.iter().map(|h| topk_cells(h, k)).collect::<Result<Vec<_>>>()?;
    if shuffle {
        for c in &mut cells {
            c.shuffle(rng);
        }
    }
    Ok(assemble(heatmaps, &cells, k, norm))
}

/// `k` positions per joint drawn with replacement in proportion to the
/// heatmap probability.
pub fn extract_random<R: Rng + ?Sized>(
    heatmaps: &[Heatmap],
    k: usize,
    norm: &Standardizer,
    rng: &mut R,
) -> Result<ArgumentSet> {
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    let mut cells = Vec::with_capacity(heatmaps.len());
    for (j, h) in heatmaps.iter().enumerate() {
        let dist = WeightedIndex::new(&h.values)
            .map_err(|e| Error::Data(format!("heatmap of joint {j} cannot be sampled: {e}")))?;
        cells.push((0..k).map(|_| dist.sample(rng)).collect::<Vec<_>>());
    }
    Ok(assemble(heatmaps, &cells, k, norm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Graph convolution with adjacency.
    Full,
    /// Graph layer replaced by a fully connected layer on the flattened
    /// joint embeddings.
    NoGcn,
    /// Constant zero condition.
    NoCondition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Starts at zero and is trained.
    Learnable,
    /// Fixed skeleton incidence (self loops included), never trained.
    FixedSkeleton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub joints: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub variant: EncoderVariant,
    pub adjacency: AdjacencyMode,
}

#[derive(Clone, Debug)]
enum Mixer {
    Graph { adjacency: ParamId, weight: ParamId },
    Dense { weight: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
struct Layers {
    embed_w: ParamId,
    embed_b: ParamId,
    mixer: Mixer,
    out_w: ParamId,
    out_b: ParamId,
}

/// Parameter handles of the condition encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub config: EncoderConfig,
    layers: Option<Layers>,
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub(crate) fn uniform_init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub const PREFIX: &str = "encoder.";

impl ConditionEncoder {
    /// Registers the encoder's parameters under the `encoder.` prefix.
    pub fn build<R: Rng + ?Sized>(
        config: EncoderConfig,
        skeleton: &Skeleton,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let EncoderConfig {
            joints: j,
            k,
            embed_dim: d,
            cond_dim,
            ..
        } = config;
        if j != skeleton.joint_count() {
            return Err(Error::Incompatible(format!(
                "encoder for {j} joints, skeleton has {}",
                skeleton.joint_count()
            )));
        }
        if k == 0 || d == 0 || cond_dim == 0 {
            return Err(Error::Parameter("k, embed_dim and cond_dim must be positive".into()));
        }
        if config.variant == EncoderVariant::NoCondition {
            return Ok(ConditionEncoder { config, layers: None });
        }
        let embed_w = store.add("encoder.embed.weight", uniform_init(vec![d, 2 * k], 2 * k, rng), true)?;
        let embed_b = store.add("encoder.embed.bias", uniform_init(vec![d], 2 * k, rng), true)?;
        let mixer = match config.variant {
            EncoderVariant::Full => {
                let weight = store.add("encoder.gcn.weight", uniform_init(vec![d, d], d, rng), true)?;
                let (a, trainable) = match config.adjacency {
                    AdjacencyMode::Learnable => (Tensor::zeros(vec![j, j]), true),
                    AdjacencyMode::FixedSkeleton => (Tensor::new(vec![j, j], skeleton.incidence())?, false),
                };
                let adjacency = store.add("encoder.gcn.adjacency", a, trainable)?;
                Mixer::Graph { adjacency, weight }
            }
            EncoderVariant::NoGcn => {
                let weight = store.add("encoder.fc.weight", uniform_init(vec![j * d, j * d], j * d, rng), true)?;
                let bias = store.add("encoder.fc.bias", uniform_init(vec![j * d], j * d, rng), true)?;
                Mixer::Dense { weight, bias }
            }
            EncoderVariant::NoCondition => unreachable!(),
        };
        let out_w = store.add(
            "encoder.out.weight",
            uniform_init(vec![cond_dim, j * d], j * d, rng),
            true,
        )?;
        let out_b = store.add("encoder.out.bias", uniform_init(vec![cond_dim], j * d, rng), true)?;
        Ok(ConditionEncoder {
            config,
            layers: Some(Layers {
                embed_w,
                embed_b,
                mixer,
                out_w,
                out_b,
            }),
        })
    }

    pub fn adjacency(&self) -> Option<ParamId> {
        match self.layers.as_ref()?.mixer {
            Mixer::Graph { adjacency, .. } => Some(adjacency),
            Mixer::Dense { .. } => None,
        }
    }

    /// Condition vectors `[B, cond_dim]` for a batch of argument sets.
    pub fn encode(&self, tape: &mut Tape, batch: &[&ArgumentSet]) -> Result<Var> {
        let EncoderConfig {
            joints: j,
            k,
            embed_dim: d,
            cond_dim,
            ..
        } = self.config;
        let b = batch.len();
        let Some(layers) = &self.layers else {
            return Ok(tape.input(Tensor::zeros(vec![b, cond_dim])));
        };
        let mut z = Vec::with_capacity(b * j * 2 * k);
        for a in batch {
            if a.joints != j || a.k != k || a.z.len() != j * 2 * k {
                return Err(Error::dim("encoder arguments", &[j, 2 * k], &[a.joints, 2 * a.k]));
            }
            z.extend_from_slice(&a.z);
        }
        let z = tape.input(Tensor::new(vec![b * j, 2 * k], z)?);
        let (ew, eb) = (tape.param(layers.embed_w), tape.param(layers.embed_b));
        let h = tape.affine(z, ew, Some(eb))?;
        let mixed = match layers.mixer {
            Mixer::Graph { adjacency, weight } => {
                let a = tape.param(adjacency);
                let w = tape.param(weight);
                let ah = tape.graph_mix(a, h)?;
                let ahw = tape.matmul(ah, w)?;
                let act = tape.silu(ahw);
                tape.reshape(act, &[b, j * d])?
            }
            Mixer::Dense { weight, bias } => {
                let flat = tape.reshape(h, &[b, j * d])?;
                let (w, bb) = (tape.param(weight), tape.param(bias));
                let y = tape.affine(flat, w, Some(bb))?;
                tape.silu(y)
            }
        };
        let (ow, ob) = (tape.param(layers.out_w), tape.param(layers.out_b));
        tape.affine(mixed, ow, Some(ob))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::silu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spike(n: usize, cell: usize) -> Heatmap {
        let mut v = vec![0.0; n * n];
        v[cell] = 1.0;
        Heatmap::new(n, n, v).unwrap()
    }

    #[test]
    fn topk_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Standardizer::identity();
        let a = extract_topk(&[spike(4, 6)], 1, &id, &mut rng, false).unwrap();
        assert_eq!(a.z, vec![2.0, 1.0]);

        let mut v = vec![0.0; 16];
        v[3] = 0.5;
        v[9] = 0.3;
        v[12] = 0.2;
        let h = Heatmap::new(4, 4, v).unwrap();
        assert_eq!(topk_cells(&h, 2).unwrap(), vec![3, 9]);
        let all = topk_cells(&h, 16).unwrap();
        assert_eq!(&all[..4], &[3, 9, 12, 0]);
        assert_eq!(
            all[4..],
            (1..16).filter(|c| ![3, 9, 12].contains(c)).collect::<Vec<_>>()[..]
        );
        assert!(matches!(topk_cells(&h, 17), Err(Error::Parameter(_))));
    }

    #[test]
    fn shuffle_permutes_within_each_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Vec<Heatmap> = (0..3)
            .map(|j| Heatmap::new(4, 4, (0..16).map(|i| ((i * 7 + j) % 16) as f32).collect()).unwrap())
            .collect();
        let id = Standardizer::identity();
        let plain = extract_topk(&h, 6, &id, &mut rng, false).unwrap();
        let shuf = extract_topk(&h, 6, &id, &mut rng, true).unwrap();
        assert_ne!(plain, shuf);
        for j in 0..3 {
            let mut a: Vec<(u32, u32)> = plain
                .row(j)
                .chunks(2)
                .map(|p| (p[0].to_bits(), p[1].to_bits()))
                .collect();
            let mut b: Vec<(u32, u32)> = shuf
                .row(j)
                .chunks(2)
                .map(|p| (p[0].to_bits(), p[1].to_bits()))
                .collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn topk_commutes_with_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h: Vec<Heatmap> = (0..4)
            .map(|_| Heatmap::new(5, 5, (0..25).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect();
        let perm = [2, 0, 3, 1];
        let hp: Vec<Heatmap> = perm.iter().map(|&p| h[p].clone()).collect();
        let id = Standardizer::identity();
        let a = extract_topk(&h, 4, &id, &mut rng, false).unwrap();
        let b = extract_topk(&hp, 4, &id, &mut rng, false).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.row(i), a.row(p));
        }
    }

    #[test]
    fn random_sampling_cases() {
        let id = Standardizer::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = extract_random(&[spike(4, 5)], 10, &id, &mut rng).unwrap();
        assert!(a.z.chunks(2).all(|p| p == [1.0, 1.0]));

        let mut uniform = vec![0.0; 16];
        for c in [0, 1, 4, 5] {
            uniform[c] = 0.25;
        }
        let h = Heatmap::new(4, 4, uniform).unwrap();
        let draws = extract_random(std::slice::from_ref(&h), 10_000, &id, &mut rng).unwrap();
        for cell in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
            let freq = draws.z.chunks(2).filter(|p| *p == cell).count() as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "{cell:?}: {freq}");
        }

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            extract_random(std::slice::from_ref(&h), 20, &id, &mut r1).unwrap(),
            extract_random(std::slice::from_ref(&h), 20, &id, &mut r2).unwrap()
        );
        let zero = Heatmap::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(matches!(extract_random(&[zero], 3, &id, &mut rng), Err(Error::Data(_))));
    }

    fn config(j: usize, k: usize, d: usize, cond: usize, variant: EncoderVariant) -> EncoderConfig {
        EncoderConfig {
            joints: j,
            k,
            embed_dim: d,
            cond_dim: cond,
            variant,
            adjacency: AdjacencyMode::Learnable,
        }
    }

    #[test]
    fn zero_adjacency_with_zero_out_bias_gives_zero_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sk = Skeleton::chain(3);
        let mut store = ParamStore::new();
        let enc = ConditionEncoder::build(config(3, 2, 4, 5, EncoderVariant::Full), &sk, &mut store, &mut rng).unwrap();
        let ob = store.id("encoder.out.bias").unwrap();
        store.get_mut(ob).value.data_mut().fill(0.0);
        let args = ArgumentSet {
            joints: 3,
            k: 2,
            z: (0..12).map(|i| i as f32 - 3.0).collect(),
        };
        let mut tape = Tape::new(&store);
        let c = enc.encode(&mut tape, &[&args]).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_condition_is_zero_and_has_no_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = ConditionEncoder::build(
            config(2, 1, 1, 3, EncoderVariant::NoCondition),
            &Skeleton::chain(2),
            &mut store,
            &mut rng,
        )
        .unwrap();
        assert!(store.is_empty());
        let args = ArgumentSet {
            joints: 2,
            k: 1,
            z: vec![5.0, -1.0, 2.0, 7.0],
        };
        let mut tape = Tape::new(&store);
        let c = enc.encode(&mut tape, &[&args, &args]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_joint_hand_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = ConditionEncoder::build(
            config(2, 1, 1, 1, EncoderVariant::Full),
            &Skeleton::chain(2),
            &mut store,
            &mut rng,
        )
        .unwrap();
        for p in store.iter_mut() {
            let fill = if p.name.ends_with("bias") { 0.0 } else { 1.0 };
            p.value.data_mut().fill(fill);
        }
        let a = store.id("encoder.gcn.adjacency").unwrap();
        store.get_mut(a).value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let args = ArgumentSet {
            joints: 2,
            k: 1,
            z: vec![1.0, 0.0, 0.0, 1.0],
        };
        let mut tape = Tape::new(&store);
        let c = enc.encode(&mut tape, &[&args]).unwrap();
        // h = (1, 1); A h W = (1, 1); c = silu(1) + silu(1)
        assert!((tape.value(c).data()[0] - 2.0 * silu(1.0)).abs() < 1e-6);
        assert!((tape.value(c).data()[0] - 1.462_117_2).abs() < 1e-6);
    }

    #[test]
    fn default_parameter_count_is_near_162k() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        ConditionEncoder::build(
            config(17, 48, 64, 144, EncoderVariant::Full),
            &Skeleton::default(),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let n = store.trainable_count(PREFIX);
        assert_eq!(n, 6208 + 4096 + 289 + 156_816);
        assert!((n as f64 / 162_000.0 - 1.0).abs() < 0.10);
    }

    #[test]
    fn fixed_adjacency_is_skeleton_incidence_and_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sk = Skeleton::default();
        let cfg = EncoderConfig {
            adjacency: AdjacencyMode::FixedSkeleton,
            ..config(17, 4, 8, 6, EncoderVariant::Full)
        };
        let enc = ConditionEncoder::build(cfg, &sk, &mut store, &mut rng).unwrap();
        let a = store.get(enc.adjacency().unwrap());
        assert!(!a.trainable);
        assert_eq!(a.value.data(), &sk.incidence()[..]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = ConditionEncoder::build(
            config(2, 2, 3, 4, EncoderVariant::Full),
            &Skeleton::chain(2),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let bad = ArgumentSet {
            joints: 2,
            k: 1,
            z: vec![0.0; 4],
        };
        let mut tape = Tape::new(&store);
        assert!(matches!(enc.encode(&mut tape, &[&bad]), Err(Error::Dimension { .. })));
    }
}
