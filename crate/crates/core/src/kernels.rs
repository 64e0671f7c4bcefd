//! Arithmetic ground truth: an fp32 MatMul oracle and the fused quantized
//! dot products that the simulator has to reproduce bit-for-bit.
//!
//! Accumulation order is fixed: exact integer MACs inside a 16-value block,
//! blocks 0..16, then superblocks in ascending order in fp32. Integer block
//! totals stay below 2^24, so converting them to f32 is exact and the block
//! loop gives the same bits whether it runs in integers or fp32.

use crate::codec::{
    self, dequantize_row, Fp16, Q2KSuperBlock, Q3KSuperBlock, Q8KSuperBlock, QuantRow,
    SuperBlockFormat, Variant, BLOCKS_PER_SB, BLOCK_LEN, QK_K,
};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Dense row-major fp32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixF32 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl MatrixF32 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(MatrixF32 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixF32 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        MatrixF32 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Weight matrix stored as one [`QuantRow`] per output row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMatrix {
    rows: usize,
    row_len: usize,
    rows_data: Vec<QuantRow>,
}

impl QuantMatrix {
    pub fn new(rows_data: Vec<QuantRow>) -> Result<Self> {
        let first = rows_data
            .first()
            .ok_or_else(|| Error::shape("quantized matrix needs at least one row"))?;
        let (variant, row_len) = (first.variant(), first.len());
        if row_len == 0 {
            return Err(Error::shape(
                "quantized rows must hold at least one superblock",
            ));
        }
        if let Some(bad) = rows_data
            .iter()
            .position(|r| r.variant() != variant || r.len() != row_len)
        {
            return Err(Error::shape(format!(
                "row {bad} is {} x {}, expected {variant} x {row_len}",
                rows_data[bad].variant(),
                rows_data[bad].len()
            )));
        }
        Ok(QuantMatrix {
            rows: rows_data.len(),
            row_len,
            rows_data,
        })
    }

    /// Quantize every row of `m`.
    pub fn quantize(m: &MatrixF32, variant: Variant) -> Result<Self> {
        let rows = Exec::default().try_map(m.rows(), |r| codec::quantize_row(m.row(r), variant))?;
        Self::new(rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    /// Superblocks per row.
    pub fn k_sb(&self) -> usize {
        self.row_len / QK_K
    }

    pub fn variant(&self) -> Variant {
        self.rows_data[0].variant()
    }

    pub fn row(&self, r: usize) -> &QuantRow {
        &self.rows_data[r]
    }

    pub fn rows_data(&self) -> &[QuantRow] {
        &self.rows_data
    }

    pub fn dequantize(&self) -> MatrixF32 {
        let data = self.rows_data.iter().flat_map(dequantize_row).collect();
        MatrixF32 {
            rows: self.rows,
            cols: self.row_len,
            data,
        }
    }
}

/// A K×N input quantized column by column: `columns[n]` holds K/256 Q8_K
/// superblocks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedInput {
    k: usize,
    columns: Vec<Vec<Q8KSuperBlock>>,
}

impl QuantizedInput {
    pub fn new(k: usize, columns: Vec<Vec<Q8KSuperBlock>>) -> Result<Self> {
        if k == 0 || !k.is_multiple_of(QK_K) {
            return Err(Error::shape(format!(
                "depth {k} is not a positive multiple of {QK_K}"
            )));
        }
        if columns.is_empty() {
            return Err(Error::shape("input needs at least one column"));
        }
        if let Some(bad) = columns.iter().position(|c| c.len() * QK_K != k) {
            return Err(Error::shape(format!(
                "column {bad} holds {} superblocks, expected {}",
                columns[bad].len(),
                k / QK_K
            )));
        }
        Ok(QuantizedInput { k, columns })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_sb(&self) -> usize {
        self.k / QK_K
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, n: usize) -> &[Q8KSuperBlock] {
        &self.columns[n]
    }

    /// Decoded K×N matrix.
    pub fn dequantize(&self) -> MatrixF32 {
        let decoded: Vec<Vec<f32>> = self
            .columns
            .iter()
            .map(|c| c.iter().flat_map(|sb| sb.dequantize()).collect())
            .collect();
        MatrixF32::from_fn(self.k, self.cols(), |r, c| decoded[c][r])
    }
}

/// Quantize each column of `x` to Q8_K, one superblock per 256-deep chunk.
pub fn quantize_input(x: &MatrixF32) -> Result<QuantizedInput> {
    quantize_input_with(x, Exec::default())
}

pub fn quantize_input_with(x: &MatrixF32, exec: Exec) -> Result<QuantizedInput> {
    if !x.rows().is_multiple_of(QK_K) {
        return Err(Error::shape(format!(
            "input depth {} is not a multiple of {QK_K}",
            x.rows()
        )));
    }
    let columns = exec.try_map(x.cols(), |n| {
        let col = x.column(n);
        col.chunks_exact(QK_K)
            .map(|c| codec::quantize_q8k(c.try_into().expect("exact chunk")))
            .collect::<Result<Vec<_>>>()
    })?;
    QuantizedInput::new(x.rows(), columns)
}

pub fn matmul_f32(a: &MatrixF32, b: &MatrixF32) -> Result<MatrixF32> {
    matmul_f32_with(a, b, Exec::default())
}

/// `C[m][n] = Σ_k A[m][k]·B[k][n]`, accumulated left to right in fp32.
pub fn matmul_f32_with(a: &MatrixF32, b: &MatrixF32, exec: Exec) -> Result<MatrixF32> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.cols());
    let rows = exec.map(m, |i| {
        let ar = a.row(i);
        (0..n)
            .map(|j| {
                let mut acc = 0.0f32;
                for (k, &av) in ar.iter().enumerate() {
                    acc += av * b.get(k, j);
                }
                acc
            })
            .collect::<Vec<f32>>()
    });
    MatrixF32::new(m, n, rows.concat())
}

pub fn vec_dot_q2k_q8k(w: &Q2KSuperBlock, x: &Q8KSuperBlock) -> f32 {
    let xq = x.qs();
    let mut sum_scaled = 0i32;
    let mut sum_min = 0i32;
    for j in 0..BLOCKS_PER_SB {
        let base = j * BLOCK_LEN;
        let dot: i32 = (base..base + BLOCK_LEN)
            .map(|i| w.q2(i) as i32 * xq[i] as i32)
            .sum();
        sum_scaled += w.scale4(j) as i32 * dot;
        sum_min += w.min4(j) as i32 * x.bsums()[j];
    }
    x.d().to_f32() * (w.d.to_f32() * sum_scaled as f32 - w.dmin.to_f32() * sum_min as f32)
}

pub fn vec_dot_q3k_q8k(w: &Q3KSuperBlock, x: &Q8KSuperBlock) -> f32 {
    let xq = x.qs();
    let mut sum = 0i32;
    for j in 0..BLOCKS_PER_SB {
        let base = j * BLOCK_LEN;
        let dot: i32 = (base..base + BLOCK_LEN)
            .map(|i| (w.q3(i) as i32 - 4) * xq[i] as i32)
            .sum();
        sum += (w.sc6(j) as i32 - 32) * dot;
    }
    x.d().to_f32() * w.d.to_f32() * sum as f32
}

/// Fused dot product of one quantized weight row with one quantized input
/// column, superblocks accumulated in ascending order.
pub fn vec_dot_row(w: &QuantRow, x: &[Q8KSuperBlock]) -> Result<f32> {
    if w.num_blocks() != x.len() {
        return Err(Error::shape(format!(
            "weight row has {} superblocks, input has {}",
            w.num_blocks(),
            x.len()
        )));
    }
    let mut acc = 0.0f32;
    match w {
        QuantRow::Q2K(blocks) => {
            for (wb, xb) in blocks.iter().zip(x) {
                acc += vec_dot_q2k_q8k(wb, xb);
            }
        }
        QuantRow::Q3K(blocks) => {
            for (wb, xb) in blocks.iter().zip(x) {
                acc += vec_dot_q3k_q8k(wb, xb);
            }
        }
        QuantRow::Q8K(_) => {
            return Err(Error::InvalidInput(
                "Q8_K is an input format, not a weight format".into(),
            ))
        }
    }
    Ok(acc)
}

fn check_weights(w: &QuantMatrix, xq: &QuantizedInput) -> Result<()> {
    if w.variant() == Variant::Q8K {
        return Err(Error::InvalidInput("weights must be Q2_K or Q3_K".into()));
    }
    if w.row_len() != xq.k() {
        return Err(Error::shape(format!(
            "weight rows are {} deep, input is {}",
            w.row_len(),
            xq.k()
        )));
    }
    Ok(())
}

/// Quantize `x` to Q8_K and multiply with the fused kernels.
pub fn matmul_bfq(w: &QuantMatrix, x: &MatrixF32) -> Result<MatrixF32> {
    matmul_bfq_with(w, x, Exec::default())
}

pub fn matmul_bfq_with(w: &QuantMatrix, x: &MatrixF32, exec: Exec) -> Result<MatrixF32> {
    if x.rows() != w.row_len() {
        return Err(Error::shape(format!(
            "weight rows are {} deep, input is {}",
            w.row_len(),
            x.rows()
        )));
    }
    let xq = quantize_input_with(x, exec)?;
    matmul_bfq_quantized_with(w, &xq, exec)
}

pub fn matmul_bfq_quantized(w: &QuantMatrix, xq: &QuantizedInput) -> Result<MatrixF32> {
    matmul_bfq_quantized_with(w, xq, Exec::default())
}

pub fn matmul_bfq_quantized_with(
    w: &QuantMatrix,
    xq: &QuantizedInput,
    exec: Exec,
) -> Result<MatrixF32> {
    check_weights(w, xq)?;
    let n = xq.cols();
    let rows = exec.try_map(w.rows(), |m| {
        (0..n)
            .map(|c| vec_dot_row(w.row(m), xq.column(c)))
            .collect::<Result<Vec<f32>>>()
    })?;
    MatrixF32::new(w.rows(), n, rows.concat())
}

/// Independent oracle: decode both operands fully, then [`matmul_f32`].
pub fn dequant_matmul_oracle(w: &QuantMatrix, xq: &QuantizedInput) -> Result<MatrixF32> {
    check_weights(w, xq)?;
    matmul_f32(&w.dequantize(), &xq.dequantize())
}

/// Relative closeness used for fused-vs-oracle checks.
pub fn within_tolerance(value: f32, oracle: f32, rel: f32) -> bool {
    (value - oracle).abs() <= rel * (1.0 + oracle.abs())
}

/// Pinned fused-vs-oracle tolerance.
pub const FUSED_REL_TOL: f32 = 1e-3;

/// Q2_K superblock decoding to all ones.
pub fn q2k_ones() -> Q2KSuperBlock {
    Q2KSuperBlock {
        scales: [0x01; 16],
        qs: [0b0101_0101; 64],
        d: Fp16::ONE,
        dmin: Fp16::ZERO,
    }
}

/// Q3_K superblock decoding to all ones (sc6 = 33, q3 = 5).
pub fn q3k_ones() -> Q3KSuperBlock {
    let mut sb = Q3KSuperBlock {
        d: Fp16::ONE,
        ..Default::default()
    };
    for j in 0..BLOCKS_PER_SB {
        sb.set_sc6(j, 33);
    }
    for i in 0..QK_K {
        sb.set_q3(i, 5);
    }
    sb
}

/// Q8_K superblock with `d = 1` and every quant 1.
pub fn q8k_ones() -> Q8KSuperBlock {
    Q8KSuperBlock::new(Fp16::ONE, [1; QK_K])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> MatrixF32 {
        MatrixF32::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..=1.0))
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 4, 3);
        assert_eq!(matmul_f32(&MatrixF32::identity(4), &b).unwrap(), b);
    }

    #[test]
    fn scalar_product() {
        let a = MatrixF32::new(1, 1, vec![2.0]).unwrap();
        let b = MatrixF32::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul_f32(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn f32_matches_f64_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 256);
        let b = random_matrix(&mut rng, 256, 2);
        let c = matmul_f32(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let exact: f64 = (0..256)
                    .map(|k| a.get(i, k) as f64 * b.get(k, j) as f64)
                    .sum();
                let abs_sum: f64 = (0..256)
                    .map(|k| (a.get(i, k) as f64 * b.get(k, j) as f64).abs())
                    .sum();
                // relative to the magnitude of the summed terms
                assert!((c.get(i, j) as f64 - exact).abs() <= 1e-6 * abs_sum.max(1.0));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = MatrixF32::zeros(2, 3);
        let b = MatrixF32::zeros(4, 2);
        assert!(matches!(matmul_f32(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn ones_dots() {
        assert_eq!(vec_dot_q2k_q8k(&q2k_ones(), &q8k_ones()), 256.0);
        assert_eq!(vec_dot_q3k_q8k(&q3k_ones(), &q8k_ones()), 256.0);
        let zeros = Q8KSuperBlock::default();
        assert_eq!(vec_dot_q2k_q8k(&q2k_ones(), &zeros), 0.0);
        assert_eq!(vec_dot_q3k_q8k(&Q3KSuperBlock::default(), &q8k_ones()), 0.0);
    }

    #[test]
    fn ones_matmul() {
        for w in [
            QuantRow::Q2K(vec![q2k_ones()]),
            QuantRow::Q3K(vec![q3k_ones()]),
        ] {
            let w = QuantMatrix::new(vec![w]).unwrap();
            let xq = QuantizedInput::new(256, vec![vec![q8k_ones()]]).unwrap();
            assert_eq!(matmul_bfq_quantized(&w, &xq).unwrap().data(), &[256.0]);
            assert_eq!(dequant_matmul_oracle(&w, &xq).unwrap().data(), &[256.0]);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = QuantMatrix::quantize(&random_matrix(&mut rng, 3, 512), Variant::Q3K).unwrap();
        let c = matmul_bfq(&w, &MatrixF32::zeros(512, 2)).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn seeded_matmul_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in [Variant::Q2K, Variant::Q3K] {
            let w = QuantMatrix::quantize(&random_matrix(&mut rng, 4, 512), variant).unwrap();
            let x = random_matrix(&mut rng, 512, 3);
            let fused = matmul_bfq(&w, &x).unwrap();
            let oracle = dequant_matmul_oracle(&w, &quantize_input(&x).unwrap()).unwrap();
            for (f, o) in fused.data().iter().zip(oracle.data()) {
                assert!(within_tolerance(*f, *o, FUSED_REL_TOL), "{f} vs {o}");
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = QuantMatrix::quantize(&random_matrix(&mut rng, 9, 768), Variant::Q2K).unwrap();
        let x = random_matrix(&mut rng, 768, 5);
        let a = matmul_bfq_with(&w, &x, Exec::Sequential).unwrap();
        let b = matmul_bfq_with(&w, &x, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_q8k_weights_and_bad_depth() {
        let w = QuantMatrix::new(vec![QuantRow::Q8K(vec![q8k_ones()])]).unwrap();
        let xq = QuantizedInput::new(256, vec![vec![q8k_ones()]]).unwrap();
        assert!(matches!(
            matmul_bfq_quantized(&w, &xq),
            Err(Error::InvalidInput(_))
        ));
        let w = QuantMatrix::new(vec![QuantRow::Q2K(vec![q2k_ones()])]).unwrap();
        assert!(matches!(
            matmul_bfq(&w, &MatrixF32::zeros(512, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn quant_matrix_rejects_mixed_rows() {
        let rows = vec![
            QuantRow::Q2K(vec![q2k_ones()]),
            QuantRow::Q3K(vec![q3k_ones()]),
        ];
        assert!(matches!(QuantMatrix::new(rows), Err(Error::Shape(_))));
    }
}
