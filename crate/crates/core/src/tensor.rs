use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order. `shape.iter().product()`
/// always equals `data.len()`, and every public operation returns finite
/// values or an `Error::Numeric` — NaN/Inf never propagates silently.
///
/// Operations are pure: inputs are untouched and identical inputs produce
/// bit-identical outputs. The only internal parallelism is over independent
/// output rows of `matmul`, which preserves each element's summation order,
/// so results stay bit-identical whether or not the `parallel` feature is
/// active.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Element by multi-index; test and report convenience, not a hot path.
    pub fn get(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if !crate::finite_checks_active() {
            return Ok(());
        }
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op} produced non-finite values")))
        }
    }

    fn last2(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::Shape(format!(
                "{op} needs rank >= 2, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[self.rank() - 2], self.shape[self.rank() - 1]))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() || new_shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                new_shape
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        let (n, c) = self.last2("transpose_last2")?;
        let batch = self.numel() / (n * c);
        // Write-once in output order: sequential stores, strided loads.
        let mut out = Vec::with_capacity(self.numel());
        for b in 0..batch {
            let src = &self.data[b * n * c..(b + 1) * n * c];
            for j in 0..c {
                out.extend((0..n).map(|i| src[i * c + j]));
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(Tensor { shape, data: out })
    }

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]`.
    /// Leading batch extents must match exactly, or one operand may be a
    /// plain matrix that is reused across the other's batches. Each output
    /// element is accumulated left-to-right over K, so results are
    /// bit-reproducible, including under row-parallel execution.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.last2("matmul")?;
        let (k2, p) = rhs.last2("matmul")?;
        let ab = &self.shape[..self.rank() - 2];
        let bb = &rhs.shape[..rhs.rank() - 2];
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (batch_shape, a_broadcast, b_broadcast) = if ab == bb {
            (ab.to_vec(), false, false)
        } else if ab.is_empty() {
            (bb.to_vec(), true, false)
        } else if bb.is_empty() {
            (ab.to_vec(), false, true)
        } else {
            return Err(Error::Shape(format!(
                "matmul batch extents differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        };
        let batch: usize = batch_shape.iter().product();
        let a_stride = if a_broadcast { 0 } else { m * k };
        let b_stride = if b_broadcast { 0 } else { k * p };
        let len = batch * m * p;

        let work = batch * m * k * p;
        let rows = batch * m;
        let run_row = |row: usize, out_row: &mut [T]| {
            let bi = row / m;
            let i = row % m;
            let a_row = &self.data[bi * a_stride + i * k..bi * a_stride + i * k + k];
            let b_mat = &rhs.data[bi * b_stride..bi * b_stride + k * p];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &b_mat[kk * p..kk * p + p];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + aik * bv;
                }
            }
        };
        // A short-and-wide product (small output tile, long inner extent)
        // would re-stream the whole right operand once per output row under
        // the row order above. Tiling the inner extent instead streams both
        // operands exactly once: each tile of right-operand rows stays
        // cache-resident across the m passes, the left operand is read in
        // sequential segments, and the output tile stays hot throughout.
        // Every output element still accumulates over K in ascending order
        // (tiles ascend, offsets within a tile ascend), so both orders give
        // bit-identical results.
        let short_wide = m * p <= 4096 && k >= 4 * m;
        let kk_tile = (4096 / p.max(1)).max(1);
        let run_block = |bi: usize, out_block: &mut [T]| {
            let a_mat = &self.data[bi * a_stride..bi * a_stride + m * k];
            let b_mat = &rhs.data[bi * b_stride..bi * b_stride + k * p];
            let mut kk0 = 0;
            while kk0 < k {
                let kk1 = (kk0 + kk_tile).min(k);
                for i in 0..m {
                    let a_seg = &a_mat[i * k + kk0..i * k + kk1];
                    let out_row = &mut out_block[i * p..i * p + p];
                    for (off, &aik) in a_seg.iter().enumerate() {
                        let b_row = &b_mat[(kk0 + off) * p..(kk0 + off) * p + p];
                        for (o, &bv) in out_row.iter_mut().zip(b_row) {
                            *o = *o + aik * bv;
                        }
                    }
                }
                kk0 = kk1;
            }
        };

        // Sequential execution accumulates each tile in a small hot scratch
        // buffer and appends it, so the output is streamed exactly once
        // instead of being zero-filled, re-fetched, and rewritten.
        let seq_fill = |out: &mut Vec<T>| {
            if short_wide {
                let mut scratch = vec![T::zero(); m * p];
                for bi in 0..batch {
                    scratch.fill(T::zero());
                    run_block(bi, &mut scratch);
                    out.extend_from_slice(&scratch);
                }
            } else {
                let mut scratch = vec![T::zero(); p];
                for row in 0..rows {
                    scratch.fill(T::zero());
                    run_row(row, &mut scratch);
                    out.extend_from_slice(&scratch);
                }
            }
        };

        #[cfg(feature = "parallel")]
        let out = {
            use rayon::prelude::*;
            let go_wide = crate::parallel_active() && work >= (1 << 21);
            if go_wide && short_wide && batch > 1 {
                let mut out = vec![T::zero(); len];
                out.par_chunks_mut(m * p)
                    .enumerate()
                    .for_each(|(bi, out_block)| run_block(bi, out_block));
                out
            } else if go_wide && !short_wide && rows > 1 {
                let mut out = vec![T::zero(); len];
                out.par_chunks_mut(p)
                    .enumerate()
                    .for_each(|(row, out_row)| run_row(row, out_row));
                out
            } else {
                let mut out = Vec::with_capacity(len);
                seq_fill(&mut out);
                out
            }
        };
        #[cfg(not(feature = "parallel"))]
        let out = {
            let _ = work;
            let mut out = Vec::with_capacity(len);
            seq_fill(&mut out);
            out
        };

        let mut shape = batch_shape;
        shape.push(m);
        shape.push(p);
        let t = Tensor { shape, data: out };
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    fn same_shape(&self, rhs: &Self, op: &str) -> Result<()> {
        if self.shape == rhs.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{op} operands differ: {:?} vs {:?}",
                self.shape, rhs.shape
            )))
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "add")?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("add")?;
        Ok(t)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_shape(rhs, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a * b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("mul")?;
        Ok(t)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        let data = self.data.iter().map(|&a| a * c).collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite("scale")?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-stable softmax over the last axis: max-subtraction, then
    /// exp/sum. Each slice is nonnegative and sums to one.
    pub fn softmax_last(&self) -> Result<Self> {
        let c = *self.shape.last().ok_or_else(|| {
            Error::Shape("softmax_last needs rank >= 1".into())
        })?;
        // Rows are normalized in a hot scratch buffer and appended, and the
        // NaN guard rides along with the max pass, so input and output are
        // each streamed once.
        let mut out = Vec::with_capacity(self.numel());
        let mut scratch = vec![T::zero(); c];
        for src in self.data.chunks(c) {
            let mut mx = src[0];
            for &v in src {
                if v.is_nan() {
                    return Err(Error::Numeric("softmax_last received NaN input".into()));
                }
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for (d, &v) in scratch.iter_mut().zip(src) {
                let e = (v - mx).exp();
                *d = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for d in scratch.iter_mut() {
                *d = *d * inv;
            }
            out.extend_from_slice(&scratch);
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.ensure_finite("softmax_last")?;
        Ok(t)
    }

    /// Per-slice normalization over the last axis to mean 0 / variance 1
    /// (biased variance), then the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let c = *self.shape.last().unwrap_or(&0);
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match channel {c}",
                gamma.shape, beta.shape
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let cn = T::from_f64(c as f64);
        let mut out = vec![T::zero(); self.numel()];
        for (src, dst) in self.data.chunks(c).zip(out.chunks_mut(c)) {
            let mut mean = T::zero();
            for &v in src {
                mean = mean + v;
            }
            mean = mean / cn;
            let mut var = T::zero();
            for &v in src {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / cn;
            let inv = T::one() / (var + eps).sqrt();
            for ((d, &v), (&g, &b)) in dst
                .iter_mut()
                .zip(src)
                .zip(gamma.data.iter().zip(&beta.data))
            {
                *d = g * ((v - mean) * inv) + b;
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.ensure_finite("layer_norm")?;
        Ok(t)
    }

    /// Exact GELU: x * Phi(x) via the error function.
    pub fn gelu(&self) -> Result<Self> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let t = self.map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()));
        t.ensure_finite("gelu")?;
        Ok(t)
    }

    /// Each last-axis slice divided by max(||slice||_2, 1e-12); zero slices
    /// pass through unchanged.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let c = *self.shape.last().ok_or_else(|| {
            Error::Shape("l2_normalize_rows needs rank >= 1".into())
        })?;
        let guard = T::from_f64(1e-12);
        let mut out = vec![T::zero(); self.numel()];
        for (src, dst) in self.data.chunks(c).zip(out.chunks_mut(c)) {
            let mut sq = T::zero();
            for &v in src {
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            let denom = if norm > guard { norm } else { guard };
            let inv = T::one() / denom;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * inv;
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.ensure_finite("l2_normalize_rows")?;
        Ok(t)
    }

    /// Mean over one axis; the axis disappears from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!(
                "mean_axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.rank() == 1 {
            let mut s = T::zero();
            for &v in &self.data {
                s = s + v;
            }
            return Tensor::new(vec![1], vec![s / T::from_f64(self.numel() as f64)]);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &self.data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        let inv = T::one() / T::from_f64(mid as f64);
        for d in out.iter_mut() {
            *d = *d * inv;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let t = Tensor { shape, data: out };
        t.ensure_finite("mean_axis")?;
        Ok(t)
    }

    /// Sum over the last axis, keeping it as extent 1.
    pub fn sum_last_keep(&self) -> Result<Self> {
        let c = *self.shape.last().ok_or_else(|| {
            Error::Shape("sum_last_keep needs rank >= 1".into())
        })?;
        let rows = self.numel() / c;
        let mut out = vec![T::zero(); rows];
        for (d, src) in out.iter_mut().zip(self.data.chunks(c)) {
            for &v in src {
                *d = *d + v;
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let t = Tensor { shape, data: out };
        t.ensure_finite("sum_last_keep")?;
        Ok(t)
    }

    /// Reorder the second-to-last axis: output slice j is input slice
    /// perm[j]. perm must be a bijection on 0..N.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let (n, c) = self.last2("permute_rows")?;
        if perm.len() != n {
            return Err(Error::Shape(format!(
                "permutation length {} does not match row count {n}",
                perm.len()
            )));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::Contract(format!(
                    "permute_rows needs a bijection on 0..{n}"
                )));
            }
            seen[p] = true;
        }
        let batch = self.numel() / (n * c);
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * n * c..(b + 1) * n * c];
            let dst = &mut out[b * n * c..(b + 1) * n * c];
            for (j, &pj) in perm.iter().enumerate() {
                dst[j * c..(j + 1) * c].copy_from_slice(&src[pj * c..(pj + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Slice [start, start+len) of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Self> {
        let c = *self.shape.last().ok_or_else(|| {
            Error::Shape("narrow_last needs rank >= 1".into())
        })?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "narrow_last [{start}, {}) out of range for extent {c}",
                start + len
            )));
        }
        let rows = self.numel() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor { shape, data: out })
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat_last(parts: &[&Tensor<T>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last of zero tensors".into()));
        }
        let lead = &parts[0].shape[..parts[0].rank() - 1];
        let mut total_c = 0;
        for p in parts {
            if p.rank() != lead.len() + 1 || &p.shape[..p.rank() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat_last leading extents differ: {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            total_c += *p.shape.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for p in parts {
                let c = *p.shape.last().unwrap();
                out.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_c);
        Ok(Tensor { shape, data: out })
    }

    /// Depthwise 3x3 convolution over tokens laid out on a (gh, gw) grid,
    /// stride 1, zero padding. kernel: [C, 3, 3], bias: [C]; the input's
    /// second-to-last extent must equal gh * gw.
    pub fn depthwise_conv3x3(
        &self,
        grid: (usize, usize),
        kernel: &Self,
        bias: &Self,
    ) -> Result<Self> {
        let (n, c) = self.last2("depthwise_conv3x3")?;
        let (gh, gw) = grid;
        if gh * gw != n {
            return Err(Error::Shape(format!(
                "grid {gh}x{gw} does not cover {n} tokens"
            )));
        }
        if kernel.shape != [c, 3, 3] || bias.shape != [c] {
            return Err(Error::Shape(format!(
                "conv kernel {:?} / bias {:?} do not match channels {c}",
                kernel.shape, bias.shape
            )));
        }
        let batch = self.numel() / (n * c);
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * n * c..(b + 1) * n * c];
            let dst = &mut out[b * n * c..(b + 1) * n * c];
            for y in 0..gh {
                for x in 0..gw {
                    let drow = &mut dst[(y * gw + x) * c..(y * gw + x + 1) * c];
                    drow.copy_from_slice(&bias.data);
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= gh as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= gw as isize {
                                continue;
                            }
                            let srow = &src[(sy as usize * gw + sx as usize) * c..][..c];
                            let krow = &kernel.data[(dy * 3 + dx)..];
                            for (ch, d) in drow.iter_mut().enumerate() {
                                *d = *d + krow[ch * 9] * srow[ch];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.ensure_finite("depthwise_conv3x3")?;
        Ok(t)
    }
}

/// Gaussian tensor, entries N(0, std^2), drawn in f64 for seed-stable
/// streams across precisions.
pub fn randn<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.normal() * std))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Random feature matrix for kernel-approximation attention: rows in each
/// block of `cols` are orthogonalized Gaussians, then each row is rescaled
/// to the length of an independent `cols`-dimensional Gaussian draw, so
/// squared row norms are chi-squared with `cols` degrees of freedom in
/// expectation.
pub fn orthogonal_gaussian<T: Scalar>(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Contract("orthogonal_gaussian needs rows, cols >= 1".into()));
    }
    let mut out: Vec<f64> = Vec::with_capacity(rows * cols);
    let mut block: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut produced = 0;
    while produced < rows {
        block.clear();
        let take = (rows - produced).min(cols);
        while block.len() < take {
            let mut v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
            for prev in &block {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue; // degenerate draw; retry
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            block.push(v);
        }
        for unit in block.iter() {
            let target: f64 = (0..cols)
                .map(|_| {
                    let g = rng.normal();
                    g * g
                })
                .sum::<f64>()
                .sqrt();
            out.extend(unit.iter().map(|&u| u * target));
        }
        produced += take;
    }
    Tensor::new(
        vec![rows, cols],
        out.into_iter().map(T::from_f64).collect(),
    )
}

// Broadcast elementwise helpers. `b` is aligned to the trailing axes of
// `a`; each aligned extent must match or be 1 on the b side. Used by the
// autodiff layer for bias adds, gating, and normalizer division.

pub(crate) fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let off = a.len() - b.len();
    b.iter()
        .zip(&a[off..])
        .all(|(&be, &ae)| be == ae || be == 1)
}

/// Map a flat index of `a` to the flat index of broadcast operand `b`.
pub(crate) fn broadcast_index(a_shape: &[usize], b_shape: &[usize], mut flat: usize) -> usize {
    let off = a_shape.len() - b_shape.len();
    let mut b_idx = 0;
    let mut b_stride = 1;
    // walk axes from the innermost outward
    let mut strides_done = vec![0usize; b_shape.len()];
    for ax in (0..a_shape.len()).rev() {
        let coord = flat % a_shape[ax];
        flat /= a_shape[ax];
        if ax >= off {
            let bax = ax - off;
            let bc = if b_shape[bax] == 1 { 0 } else { coord };
            strides_done[bax] = bc;
        }
    }
    for (bax, &ext) in b_shape.iter().enumerate().rev() {
        b_idx += strides_done[bax] * b_stride;
        b_stride *= ext;
    }
    b_idx
}

pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if !broadcast_compatible(&a.shape, &b.shape) {
        return Err(Error::Shape(format!(
            "{op}: cannot broadcast {:?} onto {:?}",
            b.shape, a.shape
        )));
    }
    // fast path: b is a contiguous suffix (no 1-extents), tiled verbatim
    let suffix_len: usize = b.shape.iter().product();
    let is_suffix = b.shape[..] == a.shape[a.rank() - b.rank()..];
    let data: Vec<T> = if is_suffix {
        a.data
            .chunks(suffix_len)
            .flat_map(|chunk| chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        (0..a.numel())
            .map(|i| f(a.data[i], b.data[broadcast_index(&a.shape, &b.shape, i)]))
            .collect()
    };
    let t = Tensor {
        shape: a.shape.clone(),
        data,
    };
    t.ensure_finite(op)?;
    Ok(t)
}

/// Sum `g` down to `shape` (the inverse of broadcasting `shape` up to
/// `g.shape`).
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut out = vec![T::zero(); numel];
    let suffix_len = numel;
    let is_suffix = shape[..] == g.shape[g.rank() - shape.len()..];
    if is_suffix {
        for chunk in g.data.chunks(suffix_len) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
    } else {
        for i in 0..g.numel() {
            let j = broadcast_index(&g.shape, shape, i);
            out[j] = out[j] + g.data[i];
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}
