//! Conditional noise `p0(· | G, W)`: Wyckoff-projected uniform coordinates,
//! masked Gaussian lattice coefficients and orbit-shared atom-type noise.

use crate::lattice::{group_mask, LatticeCoeffs};
use crate::sgdata::{SpaceGroup, WyckoffPosition};
use crate::symmetry::{certify, Crystal, SymmetryCertificate, SymmetryError, WyckoffAssignment};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SampleRng = ChaCha8Rng;

/// Tolerance used when certifying freshly drawn prior samples.
pub const PRIOR_TOL: f64 = 1e-8;

pub fn rng_from_seed(seed: u64) -> SampleRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser over `base` and `index`, giving independent
/// per-sample seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which coordinate noise to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Wyckoff,
    Uniform,
}

pub fn sample_coords(
    group: &SpaceGroup,
    positions: &[WyckoffPosition],
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, WyckoffAssignment), SymmetryError> {
    let wa = WyckoffAssignment::new(group, positions)?;
    let points: Vec<_> = wa.slices.iter().map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    Ok((wa.construct(&points), wa))
}

/// Independent uniform rows; the plane is kept for wallpaper groups.
pub fn sample_coords_uniform(group: &SpaceGroup, n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let planar = group.dimension == 2;
    Array2::from_shape_fn((n, 3), |(_, c)| if planar && c == 2 { 0.0 } else { rng.gen() })
}

/// `k′ ⊙ m(G)` with `k′ ~ N(0, scale² I)` and pinned entries overwritten.
pub fn sample_k(group: &SpaceGroup, scale: f64, rng: &mut impl Rng) -> LatticeCoeffs {
    let mut raw = [0.0; 6];
    for x in &mut raw {
        *x = scale * rng.sample::<f64, _>(StandardNormal);
    }
    group_mask(group).apply(&raw)
}

pub fn code_width(num_species: usize) -> usize {
    let mut w = 0;
    while (1usize << w) < num_species {
        w += 1;
    }
    w.max(1)
}

/// One standard-normal draw per orbit, copied to every row of the orbit.
pub fn sample_atoms(wa: &WyckoffAssignment, num_species: usize, rng: &mut impl Rng) -> Array2<f64> {
    let width = code_width(num_species);
    let mut out = Array2::zeros((wa.num_rows(), width));
    for slice in &wa.slices {
        let draw: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        for i in slice.rows() {
            for (b, v) in draw.iter().enumerate() {
                out[[i, b]] = *v;
            }
        }
    }
    out
}

/// `±1` binary code of each species index, most significant bit first.
pub fn encode_species(species: &[usize], num_species: usize) -> Array2<f64> {
    let width = code_width(num_species);
    Array2::from_shape_fn((species.len(), width), |(i, b)| {
        if (species[i] >> (width - 1 - b)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    })
}

/// Sign decoding of [`encode_species`]; codes past `num_species` clamp to the
/// last species.
pub fn decode_species(codes: &Array2<f64>, num_species: usize) -> Vec<usize> {
    let width = codes.ncols();
    (0..codes.nrows())
        .map(|i| {
            let mut s = 0usize;
            for b in 0..width {
                s = (s << 1) | usize::from(codes[[i, b]] > 0.0);
            }
            s.min(num_species.saturating_sub(1))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PriorSample {
    pub crystal: Crystal,
    pub assignment: WyckoffAssignment,
    pub certificate: SymmetryCertificate,
    pub atoms: Array2<f64>,
    pub rng_seed: u64,
}

/// Draws a full `c0` for the given conditioning. Species are carried through
/// unchanged (they fix `A` in CSP and label orbits in DNG).
pub fn sample_prior(
    group: &SpaceGroup,
    positions: &[WyckoffPosition],
    species: &[usize],
    num_species: usize,
    k_scale: f64,
    seed: u64,
) -> Result<PriorSample, SymmetryError> {
    let mut rng = rng_from_seed(seed);
    let (frac, wa) = sample_coords(group, positions, &mut rng)?;
    if species.len() != frac.nrows() {
        return Err(SymmetryError::LengthMismatch {
            expected: frac.nrows(),
            got: species.len(),
        });
    }
    let k = sample_k(group, k_scale, &mut rng);
    let atoms = sample_atoms(&wa, num_species, &mut rng);
    let crystal = Crystal::new(k, frac, species.to_vec(), num_species);
    let certificate = certify(&crystal, group, &wa, PRIOR_TOL)?;
    Ok(PriorSample {
        crystal,
        assignment: wa,
        certificate,
        atoms,
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgdata::{bundled, GroupDataset};
    use crate::symmetry::{certify_frac, is_constructable};
    use crate::torus::torus_dist;

    fn ds() -> &'static GroupDataset {
        static DS: std::sync::OnceLock<GroupDataset> = std::sync::OnceLock::new();
        DS.get_or_init(|| bundled().unwrap())
    }

    #[test]
    fn fixed_and_general_positions() {
        let g = ds().group(3, 2).unwrap();
        let mut rng = rng_from_seed(1);
        let (f, _) = sample_coords(g, &[ds().wyckoff(3, 2, "1a").unwrap().clone()], &mut rng).unwrap();
        assert_eq!(f.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
        let (f, _) = sample_coords(g, &[ds().wyckoff(3, 2, "2i").unwrap().clone()], &mut rng).unwrap();
        let neg = [1.0 - f[[0, 0]], 1.0 - f[[0, 1]], 1.0 - f[[0, 2]]];
        assert!(torus_dist(neg, [f[[1, 0]], f[[1, 1]], f[[1, 2]]]) < 1e-15);
    }

    #[test]
    fn p4mm_general_twice() {
        let g = ds().group(2, 11).unwrap();
        let w = ds().general_position(2, 11).unwrap().clone();
        assert_eq!(w.multiplicity(), 8);
        let mut rng = rng_from_seed(3);
        let (f, wa) = sample_coords(g, &[w.clone(), w], &mut rng).unwrap();
        assert_eq!(f.nrows(), 16);
        assert!(is_constructable(&f, &wa, 1e-8).ok);
        assert!(certify_frac(&f, None, g, &wa, 1e-8).is_ok());
    }

    #[test]
    fn foreign_position_is_rejected() {
        let g = ds().group(3, 2).unwrap();
        let w = ds().wyckoff(3, 221, "1a").unwrap().clone();
        assert!(sample_coords(g, &[w], &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn lattice_masks_respected() {
        let mut rng = rng_from_seed(5);
        let cubic = ds().group(3, 221).unwrap();
        let k = sample_k(cubic, 1.0, &mut rng);
        assert!(k[..5].iter().all(|&x| x == 0.0) && k[5] != 0.0);
        let tri = ds().group(3, 1).unwrap();
        let k = sample_k(tri, 1.0, &mut rng);
        assert!(k.iter().all(|&x| x != 0.0));
        let hex = ds().group(3, 191).unwrap();
        let k = sample_k(hex, 1.0, &mut rng);
        assert_eq!(k[0], -(3.0f64).ln() / 4.0);
        assert_eq!(&k[1..4], &[0.0, 0.0, 0.0]);
        assert_eq!(sample_k(tri, 1.0, &mut rng_from_seed(9)), sample_k(tri, 1.0, &mut rng_from_seed(9)));
    }

    #[test]
    fn atom_noise_shared_within_orbits() {
        let g = ds().group(3, 221).unwrap();
        let pos: Vec<_> = ["1a", "3c"].iter().map(|l| ds().wyckoff(3, 221, l).unwrap().clone()).collect();
        let wa = WyckoffAssignment::new(g, &pos).unwrap();
        let a = sample_atoms(&wa, 5, &mut rng_from_seed(2));
        assert_eq!(a.ncols(), 3);
        for i in 1..4 {
            assert_eq!(a.row(i), a.row(1));
        }
        assert_ne!(a.row(0), a.row(1));
        let single = WyckoffAssignment::new(g, &pos[1..]).unwrap();
        let a = sample_atoms(&single, 2, &mut rng_from_seed(2));
        assert_eq!(a.ncols(), 1);
        assert!(a.iter().all(|&x| x == a[[0, 0]]));
    }

    #[test]
    fn binary_codes_roundtrip() {
        assert_eq!(code_width(1), 1);
        assert_eq!(code_width(2), 1);
        assert_eq!(code_width(3), 2);
        assert_eq!(code_width(8), 3);
        assert_eq!(code_width(9), 4);
        let species: Vec<usize> = (0..7).collect();
        let enc = encode_species(&species, 7);
        assert!(enc.iter().all(|&x| x == 1.0 || x == -1.0));
        assert_eq!(decode_species(&enc, 7), species);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_eq!(derive_seed(42, 3), a[3]);
    }

    #[test]
    fn prior_samples_certify() {
        for (key, list) in &ds().wyckoffs {
            let g = &ds().groups[key];
            let pos = vec![list[0].clone(), list[list.len() - 1].clone()];
            let n: usize = pos.iter().map(|p| p.multiplicity()).sum();
            let species: Vec<usize> = pos.iter().enumerate().flat_map(|(i, p)| std::iter::repeat(i).take(p.multiplicity())).collect();
            let s = sample_prior(g, &pos, &species, 2, 1.0, derive_seed(11, n as u64)).unwrap();
            assert!(is_constructable(&s.crystal.frac, &s.assignment, 1e-8).ok);
            assert!(s.certificate.is_homomorphism(g));
        }
    }
}
