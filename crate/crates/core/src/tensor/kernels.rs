// Raw slice kernels shared by the tape ops and the tape-free helpers.

use super::Scalar;

/// `out += a[m×k] · b[k×n]`.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_pi * bv;
            }
        }
    }
}

/// Numerically stable softmax over each contiguous row of length `cols`.
///
/// Rows whose maximum is at or below half the mask sentinel are treated as
/// fully masked and set to zero. Returns the number of such rows.
pub fn softmax_rows_in_place<T: Scalar>(data: &mut [T], cols: usize, masked_below: T) -> usize {
    let mut masked = 0;
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max <= masked_below {
            row.iter_mut().for_each(|x| *x = T::zero());
            masked += 1;
            continue;
        }
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total = total + *x;
        }
        for x in row.iter_mut() {
            *x = *x / total;
        }
    }
    masked
}

/// For each element of a tensor of `out_shape`, the flat offset of the
/// element it reads from a tensor of `in_shape` under numpy broadcasting.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let pad = nd - in_shape.len();
    let mut in_strides = vec![0usize; nd];
    let mut stride = 1;
    for d in (0..in_shape.len()).rev() {
        in_strides[d + pad] = if in_shape[d] == 1 { 0 } else { stride };
        stride *= in_shape[d];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for d in (0..nd).rev() {
            index[d] += 1;
            offset += in_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= in_strides[d] * index[d];
            index[d] = 0;
        }
    }
    offsets
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_for_row_and_column_broadcast() {
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 3]), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(broadcast_offsets(&[2, 2], &[1, 1]), vec![0, 0, 0, 0]);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[2, 3]), None);
    }

    #[test]
    fn nt_and_tn_agree_with_plain_product() {
        // a: 2×3, b: 3×2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut plain = [0.0; 4];
        matmul_into(&a, &b, &mut plain, 2, 3, 2);
        let mut nt = [0.0; 4];
        matmul_nt_into(&a, &bt, &mut nt, 2, 3, 2);
        let mut tn = [0.0; 4];
        matmul_tn_into(&at, &b, &mut tn, 2, 3, 2);
        assert_eq!(plain, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(nt, plain);
        assert_eq!(tn, plain);
    }
}
