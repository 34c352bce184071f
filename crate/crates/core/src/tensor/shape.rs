pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Trailing-axis broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_back(a, rank - 1 - i);
        let db = dim_from_back(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_back(shape: &[usize], back: usize) -> usize {
    if back < shape.len() {
        shape[shape.len() - 1 - back]
    } else {
        1
    }
}

/// How a broadcast operand's elements map onto the output.
pub(crate) enum Mapping {
    /// Same shape as the output.
    Identity,
    /// Operand equals the output's trailing block: `out[i] -> in[i % len]`.
    Cyclic(usize),
    /// Arbitrary broadcast; explicit offset per output element.
    Table(Vec<usize>),
}

impl Mapping {
    pub fn new(input: &[usize], out: &[usize]) -> Self {
        let n_in = numel(input);
        if input == out {
            return Mapping::Identity;
        }
        let n_out = numel(out);
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if n_in > 0 && trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Mapping::Cyclic(n_in.max(1));
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            let d = dim_from_back(input, rank - 1 - i);
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
        let mut table = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n_out {
            table.push(off);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Mapping::Table(table)
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Mapping::Identity => i,
            Mapping::Cyclic(n) => i % n,
            Mapping::Table(t) => t[i],
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
