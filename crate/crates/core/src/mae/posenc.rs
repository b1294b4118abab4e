/// 1-D sin-cos table: `dim` columns, `sin` in the first half, `cos` in the
/// second, any odd column left zero.
fn axis_table(len: usize, dim: usize) -> Vec<Vec<f64>> {
    let half = dim / 2;
    (0..len)
        .map(|p| {
            let mut row = vec![0.0; dim];
            for i in 0..half {
                let omega = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
                row[i] = (p as f64 * omega).sin();
                row[half + i] = (p as f64 * omega).cos();
            }
            row
        })
        .collect()
}

/// Fixed 3-D positional encoding, `N x dim` in raster token order. Height and
/// width get `2 * floor(dim / 6)` columns each; time gets the rest.
pub fn sincos_3d(grid: [usize; 3], dim: usize) -> Vec<f64> {
    let spatial = 2 * (dim / 6);
    let temporal = dim - 2 * spatial;
    let tt = axis_table(grid[0], temporal);
    let th = axis_table(grid[1], spatial);
    let tw = axis_table(grid[2], spatial);
    let mut out = Vec::with_capacity(grid.iter().product::<usize>() * dim);
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                out.extend_from_slice(&tt[t]);
                out.extend_from_slice(&th[h]);
                out.extend_from_slice(&tw[w]);
            }
        }
    }
    out
}
