use super::Matrix;

/// `exp(μ)·[[cos ω, −sin ω], [sin ω, cos ω]]`, the exponential of `[[μ, −ω], [ω, μ]]`.
pub fn rotation_block(mu: f64, omega: f64) -> [[f64; 2]; 2] {
    let g = mu.exp();
    let (s, c) = omega.sin_cos();
    [[g * c, -g * s], [g * s, g * c]]
}

/// Matrix exponential.
///
/// Block-diagonal generators made of 1×1 blocks and 2×2 blocks of the form
/// `[[μ, −ω], [ω, μ]]` are exponentiated in closed form block by block; anything
/// else goes through scaling and squaring with a Taylor series.
pub fn expm(a: &Matrix) -> Matrix {
    assert!(a.is_square(), "expm needs a square matrix");
    match block_structure(a) {
        Some(blocks) => closed_form(a, &blocks),
        None => scaling_and_squaring(a),
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Scalar(usize),
    Rotation(usize),
}

fn block_structure(a: &Matrix) -> Option<Vec<Block>> {
    let n = a.rows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let pair = i + 1 < n && (a[(i, i + 1)] != 0.0 || a[(i + 1, i)] != 0.0);
        let width = if pair { 2 } else { 1 };
        if pair
            && (a[(i, i)] != a[(i + 1, i + 1)] || a[(i, i + 1)] != -a[(i + 1, i)])
        {
            return None;
        }
        // nothing outside the diagonal block in these rows
        for r in i..i + width {
            for c in 0..n {
                if (c < i || c >= i + width) && a[(r, c)] != 0.0 {
                    return None;
                }
            }
        }
        blocks.push(if pair { Block::Rotation(i) } else { Block::Scalar(i) });
        i += width;
    }
    Some(blocks)
}

fn closed_form(a: &Matrix, blocks: &[Block]) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for b in blocks {
        match *b {
            Block::Scalar(i) => out[(i, i)] = a[(i, i)].exp(),
            Block::Rotation(i) => {
                let r = rotation_block(a[(i, i)], a[(i + 1, i)]);
                out[(i, i)] = r[0][0];
                out[(i, i + 1)] = r[0][1];
                out[(i + 1, i)] = r[1][0];
                out[(i + 1, i + 1)] = r[1][1];
            }
        }
    }
    out
}

fn scaling_and_squaring(a: &Matrix) -> Matrix {
    let n = a.rows();
    let norm = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a.scale(0.5f64.powi(squarings as i32));
    // Taylor to 20 terms: remainder < 0.5^21/21! ~ 1e-26 relative
    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=20 {
        term = term.matmul(&scaled).scale(1.0 / k as f64);
        result = result.add(&term);
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}
