use rayon::prelude::*;

use super::Element;

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major contiguous `rows × cols`.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major contiguous `cols × rows` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: 1,
            cs: rows,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }

    fn rows_from(&self, start: usize, count: usize) -> MatRef<'a, T> {
        let off = start * self.rs;
        MatRef {
            data: &self.data[off.min(self.data.len())..],
            rows: count,
            ..*self
        }
    }
}

// Below this many multiply-adds a row split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 20;

/// `c = a·b + beta·c`, with `c` row-major contiguous `a.rows × b.cols`.
///
/// Rows of `c` are split across the current rayon pool when the product is
/// large; each output element is still computed by a single kernel call with
/// the same reduction order, so results do not depend on the thread count.
pub(crate) fn gemm<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.in_bounds() && b.in_bounds(), "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    let threads = rayon::current_num_threads();
    if threads > 1 && m * n * k >= PAR_THRESHOLD && m >= 2 * threads {
        let rows_per = m.div_ceil(threads);
        c.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                let start = i * rows_per;
                let rows = chunk.len() / n;
                gemm_serial(a.rows_from(start, rows), b, beta, chunk);
            });
    } else {
        gemm_serial(a, b, beta, c);
    }
}

fn gemm_serial<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert!(a.in_bounds() && b.in_bounds() && c.len() == m * n);
    // SAFETY: bounds of a and b are checked above via `in_bounds`, and c is
    // exactly m*n contiguous row-major elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product_matches_hand_result() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(
            MatRef::row_major(&a, 2, 2),
            MatRef::row_major(&b, 2, 2),
            0.0,
            &mut c,
        );
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // aᵀ·b = [1 3; 2 4] * [5 6; 7 8] = [26 30; 38 44], accumulated onto c
        gemm(
            MatRef::transposed(&a, 2, 2),
            MatRef::row_major(&b, 2, 2),
            1.0,
            &mut c,
        );
        assert_eq!(c, [45.0, 52.0, 81.0, 94.0]);
    }

    #[test]
    fn row_split_is_bit_identical() {
        let (m, k, n) = (96, 130, 70);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 89) as f32 - 44.0) / 9.0).collect();
        let mut serial = vec![0.0f32; m * n];
        gemm_serial(
            MatRef::row_major(&a, m, k),
            MatRef::row_major(&b, k, n),
            0.0,
            &mut serial,
        );
        let mut split = vec![0.0f32; m * n];
        for (i, chunk) in split.chunks_mut(17 * n).enumerate() {
            let rows = chunk.len() / n;
            gemm_serial(
                MatRef::row_major(&a, m, k).rows_from(i * 17, rows),
                MatRef::row_major(&b, k, n),
                0.0,
                chunk,
            );
        }
        assert!(serial
            .iter()
            .zip(&split)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
