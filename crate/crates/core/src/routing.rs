//! Frozen random-projection routing: the k-winner-take-all cap, per-input mask
//! generation, and expert counting.

use std::cmp::Ordering;

use num_bigint::BigUint;

use crate::error::{CometError, Result};
use crate::numerics::{matmul, sample_uniform_init, Matrix, RngStream};

/// Number of survivors in a layer of `width` neurons at survival proportion `p_k`:
/// `round(p_k * width)` clamped to `[1, width]`.
pub fn k_for(p_k: f64, width: usize) -> Result<usize> {
    check_p_k(p_k)?;
    if width == 0 {
        return Err(CometError::domain("layer width must be positive"));
    }
    Ok(((p_k * width as f64).round() as usize).clamp(1, width))
}

pub(crate) fn check_p_k(p_k: f64) -> Result<()> {
    if p_k > 0.0 && p_k <= 1.0 {
        Ok(())
    } else {
        Err(CometError::domain(format!("p_k must lie in (0, 1], got {p_k}")))
    }
}

// Larger value first; equal values resolved by lower index.
fn rank_order(v: &[f32], a: usize, b: usize) -> Ordering {
    v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// k-winner-take-all: ones at the `k` largest entries, ties to the lowest index.
pub fn cap(v: &[f32], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > v.len() {
        return Err(CometError::domain(format!(
            "cap needs 1 <= k <= {}, got k = {k}",
            v.len()
        )));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(CometError::numeric(format!("cap input contains {bad}")));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let mut out = vec![false; v.len()];
    for i in top_k(v, k, &mut idx) {
        out[*i] = true;
    }
    Ok(out)
}

/// Writes the cap of `v` into `mask` as 1.0 / 0.0. `scratch` is reused index storage.
pub(crate) fn cap_into(v: &[f32], k: usize, mask: &mut [f32], scratch: &mut Vec<usize>) {
    debug_assert!(k >= 1 && k <= v.len());
    scratch.clear();
    scratch.extend(0..v.len());
    mask.fill(0.0);
    for &i in top_k(v, k, scratch) {
        mask[i] = 1.0;
    }
}

fn top_k<'a>(v: &[f32], k: usize, idx: &'a mut [usize]) -> &'a [usize] {
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(v, a, b));
    }
    &idx[..k]
}

/// Exact binomial coefficient `C(n, k)`, the number of distinct masks of a layer.
pub fn expert_count(n: usize, k: usize) -> Result<BigUint> {
    if k == 0 || n == 0 || k > n {
        return Err(CometError::domain(format!(
            "expert count needs 1 <= k <= n, got n = {n}, k = {k}"
        )));
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 1..=k {
        // each partial product is itself a binomial, so the division is exact
        acc = acc * BigUint::from(n - k + i) / BigUint::from(i);
    }
    Ok(acc)
}

/// Frozen projection matrices `V_1..V_{L-1}`; `V_l` is `N_l x N_{l-1}`.
///
/// There is no mutable access: once built, the routing network never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingParams {
    matrices: Vec<Matrix>,
    transposed: Vec<Matrix>,
}

impl RoutingParams {
    pub fn new(matrices: Vec<Matrix>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(CometError::shape("routing network needs at least one layer"));
        }
        for (l, pair) in matrices.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(CometError::shape(format!(
                    "routing layer {} expects {} inputs but layer {} has {} outputs",
                    l + 2,
                    pair[1].cols(),
                    l + 1,
                    pair[0].rows()
                )));
            }
        }
        for m in &matrices {
            m.check_finite("routing matrix")?;
        }
        let transposed = matrices.iter().map(Matrix::transpose).collect();
        Ok(Self {
            matrices,
            transposed,
        })
    }

    /// Samples a routing network for backbone widths `N_0..N_L` (masks for layers `1..L-1`).
    pub fn init(widths: &[usize], rng: &mut RngStream) -> Result<Self> {
        if widths.len() < 3 {
            return Err(CometError::shape(
                "routing needs at least one hidden layer (widths N_0, N_1, N_L)",
            ));
        }
        let hidden = &widths[..widths.len() - 1];
        let matrices = hidden
            .windows(2)
            .map(|w| sample_uniform_init(rng, w[1], w[0], w[0]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(matrices)
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn num_layers(&self) -> usize {
        self.matrices.len()
    }

    pub fn input_dim(&self) -> usize {
        self.matrices[0].cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.matrices.iter().map(Matrix::rows).collect()
    }

    pub(crate) fn transposed(&self, layer: usize) -> &Matrix {
        &self.transposed[layer]
    }
}

/// Per-layer binary masks for one input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    masks: Vec<Vec<bool>>,
    k_per_layer: Vec<usize>,
}

impl MaskSet {
    pub fn new(masks: Vec<Vec<bool>>) -> Self {
        let k_per_layer = masks
            .iter()
            .map(|m| m.iter().filter(|b| **b).count())
            .collect();
        Self { masks, k_per_layer }
    }

    pub fn all_ones(widths: &[usize]) -> Self {
        Self::new(widths.iter().map(|&w| vec![true; w]).collect())
    }

    /// Row `row` of each per-layer 0/1 matrix.
    pub fn from_batch_row(layers: &[Matrix], row: usize) -> Self {
        Self::new(
            layers
                .iter()
                .map(|m| m.row(row).iter().map(|v| *v != 0.0).collect())
                .collect(),
        )
    }

    /// Stacks mask sets into per-layer `batch x N_l` 0/1 matrices.
    pub fn to_batch(sets: &[&MaskSet]) -> Result<Vec<Matrix>> {
        let Some(first) = sets.first() else {
            return Err(CometError::shape("no mask sets to stack"));
        };
        let widths = first.widths();
        let mut layers: Vec<Vec<f32>> = widths
            .iter()
            .map(|w| Vec::with_capacity(w * sets.len()))
            .collect();
        for set in sets {
            if set.widths() != widths {
                return Err(CometError::shape("mask sets with different layer widths"));
            }
            for (dst, m) in layers.iter_mut().zip(&set.masks) {
                dst.extend(m.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        Ok(layers
            .into_iter()
            .zip(widths)
            .map(|(d, w)| Matrix::from_raw(sets.len(), w, d))
            .collect())
    }

    pub fn num_layers(&self) -> usize {
        self.masks.len()
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.masks[l]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn k_per_layer(&self) -> &[usize] {
        &self.k_per_layer
    }

    pub fn widths(&self) -> Vec<usize> {
        self.masks.iter().map(Vec::len).collect()
    }

    /// Masks of all layers concatenated as 0/1 floats.
    pub fn concatenated(&self) -> Vec<f32> {
        self.masks
            .iter()
            .flatten()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    /// Bit-packed little-endian blob: `u32` layer count, then per layer a `u32`
    /// bit length followed by the bits, least significant bit first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.masks.len() as u32).to_le_bytes());
        for m in &self.masks {
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            let mut packed = vec![0u8; m.len().div_ceil(8)];
            for (i, _) in m.iter().enumerate().filter(|(_, b)| **b) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        out
    }

    /// Inverse of [`MaskSet::to_bytes`]; returns the set and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut pos = 0usize;
        let take_u32 = |pos: &mut usize| -> Result<u32> {
            let b = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| CometError::Format("truncated mask blob header".into()))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let layers = take_u32(&mut pos)? as usize;
        let mut masks = Vec::with_capacity(layers.min(1 << 16));
        for _ in 0..layers {
            let len = take_u32(&mut pos)? as usize;
            let nbytes = len.div_ceil(8);
            let packed = bytes
                .get(pos..pos + nbytes)
                .ok_or_else(|| CometError::Format("truncated mask blob body".into()))?;
            pos += nbytes;
            if len % 8 != 0 && packed[nbytes - 1] >> (len % 8) != 0 {
                return Err(CometError::Format("padding bits set in mask blob".into()));
            }
            masks.push((0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect());
        }
        Ok((Self::new(masks), pos))
    }
}

/// Routing forward pass for one input: `c_l = V_l z_{l-1}`, `m_l = cap(c_l, k_l)`,
/// `z_l = m_l * c_l`, starting from `z_0 = x0`.
pub fn routing_forward(routing: &RoutingParams, x0: &[f32], p_k: f64) -> Result<MaskSet> {
    let x = Matrix::row_vector(x0)?;
    let layers = routing_forward_batch(routing, &x, p_k)?;
    Ok(MaskSet::from_batch_row(&layers, 0))
}

/// Batched routing: one row of `inputs` per example. Returns the per-layer
/// `batch x N_l` 0/1 mask matrices.
pub fn routing_forward_batch(
    routing: &RoutingParams,
    inputs: &Matrix,
    p_k: f64,
) -> Result<Vec<Matrix>> {
    if inputs.cols() != routing.input_dim() {
        return Err(CometError::shape(format!(
            "routing expects {} inputs, got {}",
            routing.input_dim(),
            inputs.cols()
        )));
    }
    check_p_k(p_k)?;
    let mut z = inputs.clone();
    let mut masks = Vec::with_capacity(routing.num_layers());
    let mut scratch = Vec::new();
    for l in 0..routing.num_layers() {
        let c = matmul(&z, routing.transposed(l))?;
        c.check_finite("routing pre-activation")?;
        let width = c.cols();
        let k = k_for(p_k, width)?;
        let mut m = Matrix::zeros(c.rows(), width);
        let mut next = c;
        for r in 0..next.rows() {
            let mrow = m.row_mut(r);
            cap_into(next.row(r), k, mrow, &mut scratch);
            for (zv, mv) in next.row_mut(r).iter_mut().zip(m.row(r)) {
                *zv *= *mv;
            }
        }
        masks.push(m);
        z = next;
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn literal_cap(v: &[f32], k: usize) -> Vec<bool> {
        v.iter()
            .map(|vi| v.iter().filter(|vj| *vj >= vi).count() <= k)
            .collect()
    }

    #[test]
    fn cap_examples() {
        assert_eq!(cap(&[3.0, 1.0, 2.0], 2).unwrap(), vec![true, false, true]);
        assert_eq!(cap(&[0.5, -1.0, 9.0], 3).unwrap(), vec![true; 3]);
        assert_eq!(cap(&[5.0, 5.0, 5.0], 2).unwrap(), vec![true, true, false]);
        // the literal definition activates nothing here
        assert_eq!(literal_cap(&[5.0, 5.0, 5.0], 2), vec![false; 3]);
    }

    #[test]
    fn cap_errors() {
        assert!(matches!(cap(&[1.0, 2.0], 0), Err(CometError::Domain(_))));
        assert!(matches!(cap(&[1.0, 2.0], 3), Err(CometError::Domain(_))));
        assert!(matches!(cap(&[1.0, f32::NAN], 1), Err(CometError::Numeric(_))));
    }

    #[test]
    fn k_rounding() {
        assert_eq!(k_for(0.5, 1000).unwrap(), 500);
        assert_eq!(k_for(0.001, 100).unwrap(), 1);
        assert_eq!(k_for(0.25, 10).unwrap(), 3);
        assert_eq!(k_for(1.0, 7).unwrap(), 7);
        assert!(k_for(0.0, 7).is_err());
        assert!(k_for(1.5, 7).is_err());
    }

    #[test]
    fn expert_count_small() {
        assert_eq!(expert_count(4, 2).unwrap(), BigUint::from(6u32));
        assert_eq!(expert_count(9, 9).unwrap(), BigUint::from(1u32));
        assert!(expert_count(3, 4).is_err());
    }

    #[test]
    fn p_k_one_gives_all_ones() {
        let mut rng = RngStream::new(1, 1);
        let routing = RoutingParams::init(&[6, 5, 4, 3], &mut rng).unwrap();
        let masks = routing_forward(&routing, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0], 1.0).unwrap();
        assert_eq!(masks, MaskSet::all_ones(&[5, 4]));
    }

    #[test]
    fn routing_is_deterministic_and_exact_k() {
        let mut rng = RngStream::new(2, 1);
        let routing = RoutingParams::init(&[8, 20, 10, 2], &mut rng).unwrap();
        let before = routing.clone();
        let x: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).sin()).collect();
        let a = routing_forward(&routing, &x, 0.3).unwrap();
        let b = routing_forward(&routing, &x, 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k_per_layer(), &[6, 3]);
        assert_eq!(routing, before);
    }

    #[test]
    fn batch_rows_match_single() {
        let mut rng = RngStream::new(3, 1);
        let routing = RoutingParams::init(&[5, 9, 7, 2], &mut rng).unwrap();
        let xs: Vec<Vec<f32>> = (0..4)
            .map(|r| (0..5).map(|c| ((r * 5 + c) as f32).cos()).collect())
            .collect();
        let batch = routing_forward_batch(&routing, &Matrix::from_rows(&xs).unwrap(), 0.4).unwrap();
        for (r, x) in xs.iter().enumerate() {
            assert_eq!(
                MaskSet::from_batch_row(&batch, r),
                routing_forward(&routing, x, 0.4).unwrap()
            );
        }
    }

    #[test]
    fn routing_shape_errors() {
        let mut rng = RngStream::new(3, 1);
        let routing = RoutingParams::init(&[5, 9, 2], &mut rng).unwrap();
        assert!(matches!(
            routing_forward(&routing, &[1.0; 4], 0.5),
            Err(CometError::Shape(_))
        ));
        let bad = RoutingParams::new(vec![Matrix::zeros(3, 2), Matrix::zeros(2, 4)]);
        assert!(bad.is_err());
    }

    #[test]
    fn blob_round_trip_and_truncation() {
        let set = MaskSet::new(vec![
            vec![true, false, true, true, false, false, false, true, true],
            vec![false, true],
        ]);
        let bytes = set.to_bytes();
        let (back, used) = MaskSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(used, bytes.len());
        assert!(MaskSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn distinct_vec() -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::hash_set(-10_000i32..10_000, 1..40).prop_map(|s| {
            s.into_iter().map(|v| v as f32 * 0.01).collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn cap_sums_to_k(v in proptest::collection::vec(-5i8..5, 1..50), kf in 0.0f64..1.0) {
            let v: Vec<f32> = v.into_iter().map(f32::from).collect();
            let k = 1 + (kf * (v.len() - 1) as f64) as usize;
            prop_assert_eq!(cap(&v, k).unwrap().iter().filter(|b| **b).count(), k);
        }

        #[test]
        fn cap_matches_literal_when_distinct(v in distinct_vec(), kf in 0.0f64..1.0) {
            let k = 1 + (kf * (v.len() - 1) as f64) as usize;
            prop_assert_eq!(cap(&v, k).unwrap(), literal_cap(&v, k));
        }

        #[test]
        fn cap_permutation_equivariant(v in distinct_vec(), seed in any::<u64>(), kf in 0.0f64..1.0) {
            let k = 1 + (kf * (v.len() - 1) as f64) as usize;
            let mut perm: Vec<usize> = (0..v.len()).collect();
            RngStream::new(seed, 0).shuffle(&mut perm);
            let permuted: Vec<f32> = perm.iter().map(|&i| v[i]).collect();
            let base = cap(&v, k).unwrap();
            let expect: Vec<bool> = perm.iter().map(|&i| base[i]).collect();
            prop_assert_eq!(cap(&permuted, k).unwrap(), expect);
        }

        #[test]
        fn cap_affine_invariant(v in distinct_vec(), a in 0.1f32..10.0, b in -50.0f32..50.0, kf in 0.0f64..1.0) {
            let k = 1 + (kf * (v.len() - 1) as f64) as usize;
            let w: Vec<f32> = v.iter().map(|x| a * x + b).collect();
            // f32 rounding can merge close values; only compare when order survives
            let mut sorted = w.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assume!(sorted.windows(2).all(|p| p[0] < p[1]));
            prop_assert_eq!(cap(&w, k).unwrap(), cap(&v, k).unwrap());
        }

        #[test]
        fn mask_blob_round_trip(bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 0..70), 0..5)) {
            let set = MaskSet::new(bits);
            let (back, _) = MaskSet::from_bytes(&set.to_bytes()).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
