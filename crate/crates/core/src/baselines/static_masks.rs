use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};
use crate::numerics::{Matrix, RngStream};
use crate::routing::{check_p_k, MaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaticMaskMode {
    /// Every neuron i.i.d. Bernoulli(`p_k`) per example.
    Bernoulli,
    /// A shared always-on pool plus per-example Bernoulli(`p_k`) draws for the rest.
    ExampleTied,
}

/// Fixed per-example masks, assigned once and never changed.
///
/// Examples outside the table get a mask from [`MaskTable::eval_mask`]: the
/// generalization pool alone (example-tied) or a fresh draw keyed by a hash of
/// the input values (Bernoulli).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTable {
    mode: StaticMaskMode,
    p_k: f64,
    eval_seed: u64,
    pool: MaskSet,
    masks: Vec<MaskSet>,
}

/// Draws one fixed mask per training example for every hidden layer.
pub fn assign_static_masks(
    dataset_size: usize,
    hidden_widths: &[usize],
    p_k: f64,
    generalization_fraction: f64,
    rng: &mut RngStream,
    mode: StaticMaskMode,
) -> Result<MaskTable> {
    check_p_k(p_k)?;
    if !(0.0..=1.0).contains(&generalization_fraction) {
        return Err(CometError::domain(format!(
            "generalization fraction {generalization_fraction} outside [0, 1]"
        )));
    }
    let pool = match mode {
        StaticMaskMode::Bernoulli => MaskSet::new(hidden_widths.iter().map(|&w| vec![false; w]).collect()),
        StaticMaskMode::ExampleTied => MaskSet::new(
            hidden_widths
                .iter()
                .map(|&w| {
                    let size = (generalization_fraction * w as f64).round() as usize;
                    let mut order: Vec<usize> = (0..w).collect();
                    rng.shuffle(&mut order);
                    let mut layer = vec![false; w];
                    for &i in &order[..size.min(w)] {
                        layer[i] = true;
                    }
                    layer
                })
                .collect(),
        ),
    };
    let eval_seed = rng.next_seed();
    let masks = (0..dataset_size)
        .map(|_| draw_with_pool(&pool, p_k, rng))
        .collect();
    Ok(MaskTable {
        mode,
        p_k,
        eval_seed,
        pool,
        masks,
    })
}

fn draw_with_pool(pool: &MaskSet, p_k: f64, rng: &mut RngStream) -> MaskSet {
    MaskSet::new(
        pool.layers()
            .iter()
            .map(|layer| layer.iter().map(|&on| on | rng.bernoulli(p_k)).collect())
            .collect(),
    )
}

// FNV-1a over the bit patterns of the values.
fn hash_values(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl MaskTable {
    pub fn mode(&self) -> StaticMaskMode {
        self.mode
    }

    pub fn p_k(&self) -> f64 {
        self.p_k
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn generalization_pool(&self) -> &MaskSet {
        &self.pool
    }

    pub fn lookup(&self, example_id: usize) -> Result<&MaskSet> {
        self.masks
            .get(example_id)
            .ok_or(CometError::Lookup(example_id))
    }

    /// Mask for an input that has no table entry.
    pub fn eval_mask(&self, input: &[f32]) -> MaskSet {
        match self.mode {
            StaticMaskMode::ExampleTied => self.pool.clone(),
            StaticMaskMode::Bernoulli => {
                let mut rng = RngStream::new(self.eval_seed, hash_values(input));
                draw_with_pool(&self.pool, self.p_k, &mut rng)
            }
        }
    }

    /// Per-layer `batch x N_l` masks for training examples.
    pub fn batch_masks(&self, ids: &[usize]) -> Result<Vec<Matrix>> {
        let sets = ids
            .iter()
            .map(|&id| self.lookup(id))
            .collect::<Result<Vec<_>>>()?;
        MaskSet::to_batch(&sets)
    }

    /// Per-layer masks for unseen inputs, one per row.
    pub fn eval_batch_masks(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        let sets: Vec<MaskSet> = inputs.iter_rows().map(|r| self.eval_mask(r)).collect();
        MaskSet::to_batch(&sets.iter().collect::<Vec<_>>())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![match self.mode {
            StaticMaskMode::Bernoulli => 0u8,
            StaticMaskMode::ExampleTied => 1u8,
        }];
        out.extend_from_slice(&self.p_k.to_le_bytes());
        out.extend_from_slice(&self.eval_seed.to_le_bytes());
        out.extend_from_slice(&self.pool.to_bytes());
        out.extend_from_slice(&(self.masks.len() as u64).to_le_bytes());
        for m in &self.masks {
            out.extend_from_slice(&m.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || CometError::Format("truncated mask table".into());
        let mode = match bytes.first().ok_or_else(short)? {
            0 => StaticMaskMode::Bernoulli,
            1 => StaticMaskMode::ExampleTied,
            other => return Err(CometError::Format(format!("unknown mask table mode {other}"))),
        };
        let fixed = bytes.get(1..17).ok_or_else(short)?;
        let p_k = f64::from_le_bytes(fixed[..8].try_into().expect("8 bytes"));
        let eval_seed = u64::from_le_bytes(fixed[8..].try_into().expect("8 bytes"));
        let mut pos = 17;
        let (pool, used) = MaskSet::from_bytes(&bytes[pos..])?;
        pos += used;
        let count = u64::from_le_bytes(
            bytes
                .get(pos..pos + 8)
                .ok_or_else(short)?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        pos += 8;
        let mut masks = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let (m, used) = MaskSet::from_bytes(&bytes[pos..])?;
            pos += used;
            masks.push(m);
        }
        if pos != bytes.len() {
            return Err(CometError::Format("trailing bytes after mask table".into()));
        }
        Ok(Self {
            mode,
            p_k,
            eval_seed,
            pool,
            masks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_survival_gives_all_ones() {
        for mode in [StaticMaskMode::Bernoulli, StaticMaskMode::ExampleTied] {
            let mut rng = RngStream::new(1, 0);
            let t = assign_static_masks(5, &[7, 4], 1.0, 0.2, &mut rng, mode).unwrap();
            for id in 0..5 {
                assert_eq!(t.lookup(id).unwrap(), &MaskSet::all_ones(&[7, 4]));
            }
        }
    }

    #[test]
    fn bernoulli_active_fraction() {
        let mut rng = RngStream::new(2, 0);
        let t = assign_static_masks(100, &[1000], 0.5, 0.2, &mut rng, StaticMaskMode::Bernoulli).unwrap();
        let on: usize = (0..100).map(|i| t.lookup(i).unwrap().k_per_layer()[0]).sum();
        assert!((on as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn example_tied_pool_is_shared() {
        let mut rng = RngStream::new(3, 0);
        let t = assign_static_masks(50, &[100], 0.1, 0.2, &mut rng, StaticMaskMode::ExampleTied).unwrap();
        let pool: Vec<usize> = (0..100).filter(|&i| t.generalization_pool().layer(0)[i]).collect();
        assert_eq!(pool.len(), 20);
        for id in 0..50 {
            let m = t.lookup(id).unwrap();
            assert!(pool.iter().all(|&i| m.layer(0)[i]));
        }
        assert_eq!(&t.eval_mask(&[1.0, 2.0]), t.generalization_pool());
    }

    #[test]
    fn lookups_are_stable_and_bounded() {
        let mut rng = RngStream::new(4, 0);
        let t = assign_static_masks(3, &[8, 8], 0.5, 0.2, &mut rng, StaticMaskMode::Bernoulli).unwrap();
        let a = t.lookup(2).unwrap().clone();
        for _ in 0..10 {
            assert_eq!(t.lookup(2).unwrap(), &a);
        }
        assert!(matches!(t.lookup(3), Err(CometError::Lookup(3))));
        let x = [0.5f32, -1.0, 3.0];
        assert_eq!(t.eval_mask(&x), t.eval_mask(&x));
    }

    #[test]
    fn table_bytes_round_trip() {
        let mut rng = RngStream::new(5, 0);
        let t = assign_static_masks(4, &[9, 3], 0.4, 0.3, &mut rng, StaticMaskMode::ExampleTied).unwrap();
        assert_eq!(MaskTable::from_bytes(&t.to_bytes()).unwrap(), t);
    }
}
