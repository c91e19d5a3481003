//! Block-shuffle keys: a grid partition, a block permutation and per-block
//! flips.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::{Image, CHANNELS};
use crate::{Error, Result};

pub const KEY_FORMAT_VERSION: u32 = 1;

/// `flips[b]` mirrors output block `b`: `h` swaps columns, `v` swaps rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[bool; 2]", into = "[bool; 2]")]
pub struct Flip {
    pub h: bool,
    pub v: bool,
}

impl From<[bool; 2]> for Flip {
    fn from([h, v]: [bool; 2]) -> Self {
        Flip { h, v }
    }
}

impl From<Flip> for [bool; 2] {
    fn from(f: Flip) -> Self {
        [f.h, f.v]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JigsawKey {
    grid_rows: usize,
    grid_cols: usize,
    permutation: Vec<usize>,
    flips: Vec<Flip>,
    version: u32,
}

/// Serialized field order is the canonical order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyRecord {
    version: u32,
    grid: [usize; 2],
    permutation: Vec<usize>,
    flips: Vec<Flip>,
}

impl JigsawKey {
    pub fn from_parts(grid: (usize, usize), permutation: Vec<usize>, flips: Vec<Flip>) -> Result<Self> {
        let (rows, cols) = grid;
        let blocks = rows * cols;
        if blocks < 2 {
            return Err(Error::Config(format!("{rows}x{cols} grid has fewer than 2 blocks")));
        }
        if permutation.len() != blocks || flips.len() != blocks {
            return Err(Error::Format(format!(
                "{blocks} blocks but {} permutation entries and {} flips",
                permutation.len(),
                flips.len()
            )));
        }
        let mut seen = vec![false; blocks];
        for &p in &permutation {
            if p >= blocks || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Format(format!("permutation is not a bijection on 0..{blocks}")));
            }
        }
        Ok(Self {
            grid_rows: rows,
            grid_cols: cols,
            permutation,
            flips,
            version: KEY_FORMAT_VERSION,
        })
    }

    pub fn identity(grid: (usize, usize)) -> Result<Self> {
        let blocks = grid.0 * grid.1;
        Self::from_parts(grid, (0..blocks).collect(), vec![Flip::default(); blocks])
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn blocks(&self) -> usize {
        self.permutation.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn flips(&self) -> &[Flip] {
        &self.flips
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Bits of key space contributed by the permutation alone.
    pub fn permutation_bits(&self) -> f64 {
        log2_factorial(self.blocks())
    }

    pub fn to_json(&self) -> String {
        let rec = KeyRecord {
            version: self.version,
            grid: [self.grid_rows, self.grid_cols],
            permutation: self.permutation.clone(),
            flips: self.flips.clone(),
        };
        serde_json::to_string(&rec).expect("key record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: KeyRecord = serde_json::from_str(s)?;
        if rec.version != KEY_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported key version {}", rec.version)));
        }
        Self::from_parts((rec.grid[0], rec.grid[1]), rec.permutation, rec.flips)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?.trim_end())
    }

    /// Short stable identifier: first 8 bytes of the SHA-256 of the
    /// canonical record, hex encoded.
    pub fn id(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn block_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.grid_rows) || !width.is_multiple_of(self.grid_cols) || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width} image does not divide into a {}x{} grid",
                self.grid_rows, self.grid_cols
            )));
        }
        Ok((height / self.grid_rows, width / self.grid_cols))
    }

    /// Per-plane gather map of the shuffle: `out[p] = in[map[p]]`.
    pub fn shuffle_map(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        let (bh, bw) = self.block_dims(height, width)?;
        let mut map = vec![0; height * width];
        for (b, (&src, flip)) in self.permutation.iter().zip(&self.flips).enumerate() {
            let (oy, ox) = ((b / self.grid_cols) * bh, (b % self.grid_cols) * bw);
            let (sy, sx) = ((src / self.grid_cols) * bh, (src % self.grid_cols) * bw);
            for dy in 0..bh {
                let ly = if flip.v { bh - 1 - dy } else { dy };
                for dx in 0..bw {
                    let lx = if flip.h { bw - 1 - dx } else { dx };
                    map[(oy + dy) * width + ox + dx] = (sy + ly) * width + sx + lx;
                }
            }
        }
        Ok(map)
    }

    /// Gather map of the inverse shuffle.
    pub fn unshuffle_map(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        let fwd = self.shuffle_map(height, width)?;
        let mut inv = vec![0; fwd.len()];
        for (p, &s) in fwd.iter().enumerate() {
            inv[s] = p;
        }
        Ok(inv)
    }
}

pub fn log2_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).log2()).sum()
}

/// Uniform permutation and fair-coin flips, deterministic in `seed`.
pub fn new_key(grid: (usize, usize), seed: u64) -> Result<JigsawKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_key(grid, &mut rng)
}

pub fn random_key<R: Rng + ?Sized>(grid: (usize, usize), rng: &mut R) -> Result<JigsawKey> {
    let blocks = grid.0 * grid.1;
    if blocks < 2 {
        return Err(Error::Config(format!("{}x{} grid has fewer than 2 blocks", grid.0, grid.1)));
    }
    let mut permutation: Vec<usize> = (0..blocks).collect();
    permutation.shuffle(rng);
    let flips = (0..blocks)
        .map(|_| Flip {
            h: rng.random_bool(0.5),
            v: rng.random_bool(0.5),
        })
        .collect();
    JigsawKey::from_parts(grid, permutation, flips)
}

/// A key of the same grid drawn independently of `key`, resampled until it
/// differs from it.
pub fn random_wrong_key<R: Rng + ?Sized>(key: &JigsawKey, rng: &mut R) -> JigsawKey {
    loop {
        let k = random_key(key.grid(), rng).expect("grid already validated");
        if k != *key {
            return k;
        }
    }
}

fn gather<T: jigwm_autograd::Scalar>(img: &Image<T>, map: &[usize]) -> Vec<T> {
    let plane = img.plane();
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..CHANNELS {
        let p = &img.data()[c * plane..(c + 1) * plane];
        out.extend(map.iter().map(|&s| p[s]));
    }
    out
}

pub fn apply_shuffle<T: jigwm_autograd::Scalar>(img: &Image<T>, key: &JigsawKey) -> Result<Image<T>> {
    let map = key.shuffle_map(img.height(), img.width())?;
    Image::new(img.height(), img.width(), gather(img, &map))
}

pub fn invert_shuffle<T: jigwm_autograd::Scalar>(img: &Image<T>, key: &JigsawKey) -> Result<Image<T>> {
    let map = key.unshuffle_map(img.height(), img.width())?;
    Image::new(img.height(), img.width(), gather(img, &map))
}

/// Swaps `n_pairs` disjoint pairs of permutation entries; flips untouched.
pub fn perturb_key(key: &JigsawKey, n_pairs: usize, seed: u64) -> Result<JigsawKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_key_with(key, n_pairs, &mut rng)
}

pub fn perturb_key_with<R: Rng + ?Sized>(key: &JigsawKey, n_pairs: usize, rng: &mut R) -> Result<JigsawKey> {
    let blocks = key.blocks();
    if n_pairs == 0 || n_pairs > blocks / 2 {
        return Err(Error::Config(format!("{n_pairs} swapped pairs outside 1..={} for {blocks} blocks", blocks / 2)));
    }
    let picks = index::sample(rng, blocks, 2 * n_pairs).into_vec();
    let mut out = key.clone();
    for pair in picks.chunks(2) {
        out.permutation.swap(pair[0], pair[1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image<f64> {
        Image::from_fn(h, w, |c, y, x| ((c * h + y) * w + x) as f64 / (3 * h * w) as f64)
    }

    #[test]
    fn rejects_degenerate_grid() {
        assert!(new_key((1, 1), 0).is_err());
        assert!(new_key((0, 4), 0).is_err());
    }

    #[test]
    fn one_by_two_grid_has_two_permutations() {
        for seed in 0..32 {
            let k = new_key((1, 2), seed).unwrap();
            assert!(k.permutation() == [0, 1] || k.permutation() == [1, 0]);
        }
    }

    #[test]
    fn sixteen_block_key_space() {
        let k = new_key((4, 4), 7).unwrap();
        let mut p = k.permutation().to_vec();
        p.sort();
        assert_eq!(p, (0..16).collect::<Vec<_>>());
        assert!((k.permutation_bits() - 44.25).abs() < 0.01);
    }

    #[test]
    fn identity_key_is_identity_map() {
        let img = ramp(8, 8);
        let k = JigsawKey::identity((4, 4)).unwrap();
        assert_eq!(apply_shuffle(&img, &k).unwrap(), img);
        assert_eq!(invert_shuffle(&img, &k).unwrap(), img);
    }

    #[test]
    fn two_by_one_swap_exchanges_halves() {
        let img: Image<f64> = Image::from_fn(4, 3, |_, y, _| if y < 2 { 1.0 } else { 0.0 });
        let k = JigsawKey::from_parts((2, 1), vec![1, 0], vec![Flip::default(); 2]).unwrap();
        let out = apply_shuffle(&img, &k).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..3 {
                    assert_eq!(out.get(c, y, x), if y < 2 { 0.0 } else { 1.0 });
                }
            }
        }
    }

    #[test]
    fn flip_mirrors_within_block() {
        let img = ramp(2, 4);
        let k = JigsawKey::from_parts((1, 2), vec![0, 1], vec![Flip { h: true, v: false }, Flip::default()]).unwrap();
        let out = apply_shuffle(&img, &k).unwrap();
        assert_eq!(out.get(0, 0, 0), img.get(0, 0, 1));
        assert_eq!(out.get(0, 1, 1), img.get(0, 1, 0));
        assert_eq!(out.get(0, 1, 3), img.get(0, 1, 3));
    }

    #[test]
    fn non_divisible_dimensions_are_rejected() {
        let k = new_key((4, 4), 1).unwrap();
        assert!(matches!(apply_shuffle(&ramp(10, 8), &k), Err(Error::Dimension(_))));
    }

    #[test]
    fn both_composition_orders_are_identity() {
        let img = ramp(12, 8);
        for seed in 0..100 {
            let k = new_key((4, 4), seed).unwrap();
            assert_eq!(invert_shuffle(&apply_shuffle(&img, &k).unwrap(), &k).unwrap(), img);
            assert_eq!(apply_shuffle(&invert_shuffle(&img, &k).unwrap(), &k).unwrap(), img);
        }
    }

    #[test]
    fn json_is_canonical() {
        let k = new_key((2, 3), 5).unwrap();
        let s = k.to_json();
        assert!(s.starts_with(r#"{"version":1,"grid":[2,3],"permutation":["#));
        assert_eq!(JigsawKey::from_json(&s).unwrap().to_json(), s);
        assert!(JigsawKey::from_json(r#"{"version":1,"grid":[1,2],"permutation":[0,0],"flips":[[false,false],[true,true]]}"#).is_err());
    }

    #[test]
    fn perturb_key_counts() {
        let k = new_key((4, 4), 3).unwrap();
        let one = perturb_key(&k, 1, 9).unwrap();
        let diff = |a: &JigsawKey| a.permutation().iter().zip(k.permutation()).filter(|(x, y)| x != y).count();
        assert_eq!(diff(&one), 2);
        assert_eq!(one.flips(), k.flips());
        assert_eq!(diff(&perturb_key(&k, 8, 9).unwrap()), 16);
        assert!(perturb_key(&k, 0, 0).is_err());
        assert!(perturb_key(&k, 9, 0).is_err());
        let pair = JigsawKey::identity((1, 2)).unwrap();
        assert_eq!(perturb_key(&pair, 1, 0).unwrap().permutation(), [1, 0]);
    }

    #[test]
    fn wrong_key_differs() {
        let k = new_key((1, 2), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_ne!(random_wrong_key(&k, &mut rng), k);
        }
    }
}
