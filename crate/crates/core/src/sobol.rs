//! Digitally shifted Sobol points for initial designs. Direction numbers
//! cover the feature capacities used here (up to 21 dimensions).

use rand::Rng;

/// (degree, coefficient, initial direction numbers) per dimension beyond the
/// first; the first dimension is the base-2 van der Corput sequence.
const DIRECTIONS: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 3, 25, 9]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 41, 3, 117]),
];

const BITS: u32 = 32;

/// Maximum supported dimensionality.
pub const MAX_DIM: usize = DIRECTIONS.len() + 1;

fn direction_vectors(dim_index: usize) -> [u32; BITS as usize] {
    let mut v = [0u32; BITS as usize];
    if dim_index == 0 {
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1u32 << (BITS - 1 - k as u32);
        }
        return v;
    }
    let (degree, coeff, m_init) = DIRECTIONS[dim_index - 1];
    let s = degree as usize;
    let mut m = vec![0u32; BITS as usize];
    m[..s].copy_from_slice(&m_init[..s]);
    for k in s..BITS as usize {
        let mut value = m[k - s] ^ (m[k - s] << s);
        for i in 1..s {
            if (coeff >> (s - 1 - i)) & 1 == 1 {
                value ^= m[k - i] << i;
            }
        }
        m[k] = value;
    }
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = m[k] << (BITS - 1 - k as u32);
    }
    v
}

/// The first `count` points of a digitally shifted Sobol sequence in
/// `[0, 1)^dim`.
pub fn sobol_points<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    assert!(dim >= 1 && dim <= MAX_DIM, "dimension {dim} unsupported");
    let directions: Vec<[u32; BITS as usize]> = (0..dim).map(direction_vectors).collect();
    let shift: Vec<u32> = (0..dim).map(|_| rng.gen::<u32>()).collect();

    let mut state = vec![0u32; dim];
    let mut out = Vec::with_capacity(count);
    for i in 0..count as u64 {
        if i > 0 {
            let bit = i.trailing_zeros() as usize;
            for (j, s) in state.iter_mut().enumerate() {
                *s ^= directions[j][bit];
            }
        }
        out.push(
            state
                .iter()
                .zip(shift.iter())
                .map(|(s, sh)| f64::from(s ^ sh) / f64::from(u32::MAX) / (1.0 + 1e-9))
                .collect(),
        );
    }
    out
}
