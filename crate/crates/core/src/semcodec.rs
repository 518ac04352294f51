//! Semantic payload codecs and the bit channel they travel over.
//!
//! The common stream carries a segmentation map as one-hot cells, split into
//! `M` equal-area tiles; a common budget of `n_c` sends the first `n_c` tiles.
//! Each private stream carries the first `n_p,k` words of that user's prompt
//! as 8-bit ASCII. Bits cross a binary symmetric channel whose flip rate comes
//! from the stream SINR.

use std::collections::HashSet;
use std::fmt;
use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// A class-label grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_classes: usize,
    /// Row-major labels.
    pub cells: Vec<u8>,
}

impl SemanticMap {
    pub fn new(grid_h: usize, grid_w: usize, n_classes: usize, cells: Vec<u8>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::config("map dimensions must be >= 1"));
        }
        if !(1..=256).contains(&n_classes) {
            return Err(Error::config(format!("n_classes must be in 1..=256, got {n_classes}")));
        }
        if cells.len() != grid_h * grid_w {
            return Err(Error::dim("map cells", grid_h * grid_w, cells.len()));
        }
        if let Some(bad) = cells.iter().find(|&&c| c as usize >= n_classes) {
            return Err(Error::domain(format!("label {bad} >= n_classes {n_classes}")));
        }
        Ok(SemanticMap {
            grid_h,
            grid_w,
            n_classes,
            cells,
        })
    }

    /// Relative frequency of each class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_classes];
        for &c in &self.cells {
            counts[c as usize] += 1;
        }
        let n = self.cells.len() as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// How a map is cut into transmission tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_classes: usize,
    /// Total number of tiles `M`.
    pub tiles: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl MapGeometry {
    /// Picks the `tile_rows × tile_cols = tiles` factorization that divides the
    /// grid and gives the squarest tiles (ties go to fewer tile rows).
    pub fn new(grid_h: usize, grid_w: usize, n_classes: usize, tiles: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || tiles == 0 || n_classes == 0 {
            return Err(Error::config("map geometry needs non-zero dimensions, classes and tiles"));
        }
        let best = (1..=tiles)
            .filter(|r| tiles % r == 0)
            .map(|r| (r, tiles / r))
            .filter(|&(r, c)| grid_h % r == 0 && grid_w % c == 0)
            .min_by_key(|&(r, c)| ((grid_h / r).abs_diff(grid_w / c), r));
        let (tile_rows, tile_cols) = best.ok_or_else(|| {
            Error::config(format!(
                "a {grid_h}x{grid_w} grid cannot be split into {tiles} equal tiles"
            ))
        })?;
        Ok(MapGeometry {
            grid_h,
            grid_w,
            n_classes,
            tiles,
            tile_rows,
            tile_cols,
        })
    }

    pub fn of_map(map: &SemanticMap, tiles: usize) -> Result<Self> {
        Self::new(map.grid_h, map.grid_w, map.n_classes, tiles)
    }

    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tile_h(&self) -> usize {
        self.grid_h / self.tile_rows
    }

    pub fn tile_w(&self) -> usize {
        self.grid_w / self.tile_cols
    }

    pub fn cells_per_tile(&self) -> usize {
        self.tile_h() * self.tile_w()
    }

    /// Flat cell indices of tile `t`, row-major inside the tile.
    pub fn tile_cells(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        let (th, tw) = (self.tile_h(), self.tile_w());
        let r0 = (t / self.tile_cols) * th;
        let c0 = (t % self.tile_cols) * tw;
        (0..th).flat_map(move |r| (0..tw).map(move |c| (r0 + r) * self.grid_w + c0 + c))
    }

    fn check_map(&self, map: &SemanticMap) -> Result<()> {
        if map.grid_h != self.grid_h || map.grid_w != self.grid_w || map.n_classes != self.n_classes {
            return Err(Error::config("map does not match the codec geometry"));
        }
        Ok(())
    }
}

/// Semantic extraction budget: `n_c` common tiles, `n_p,k` private words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticBudget {
    pub n_c: usize,
    pub n_p: Vec<usize>,
    pub m_max: usize,
    pub n_max: usize,
}

impl SemanticBudget {
    pub fn new(n_c: usize, n_p: Vec<usize>, m_max: usize, n_max: usize) -> Result<Self> {
        if n_c > m_max {
            return Err(Error::domain(format!("n_c = {n_c} exceeds M = {m_max}")));
        }
        if let Some(&bad) = n_p.iter().find(|&&n| n > n_max) {
            return Err(Error::domain(format!("n_p = {bad} exceeds N = {n_max}")));
        }
        Ok(SemanticBudget {
            n_c,
            n_p,
            m_max,
            n_max,
        })
    }
}

/// A sequence of bits.
#[derive(Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BitStream(pub Vec<bool>);

impl BitStream {
    pub fn from_str01(s: &str) -> Self {
        BitStream(s.chars().filter(|c| !c.is_whitespace()).map(|c| c == '1').collect())
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &BitStream) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl Deref for BitStream {
    type Target = [bool];
    fn deref(&self) -> &[bool] {
        &self.0
    }
}

impl fmt::Debug for BitStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.0.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "BitStream({s})")
    }
}

/// A partially received map; tiles that were not sent are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialMap {
    pub geometry: MapGeometry,
    pub cells: Vec<Option<u8>>,
}

impl PartialMap {
    pub fn received_tiles(&self) -> usize {
        (0..self.geometry.tiles)
            .take_while(|&t| self.geometry.tile_cells(t).all(|i| self.cells[i].is_some()))
            .count()
    }

    /// Cells that were received and match `truth`.
    pub fn correct_cells(&self, truth: &SemanticMap) -> usize {
        self.cells
            .iter()
            .zip(&truth.cells)
            .filter(|(got, want)| **got == Some(**want))
            .count()
    }

    /// Fills absent cells with `fill` and returns a complete map.
    pub fn complete(&self, fill: u8) -> Result<SemanticMap> {
        SemanticMap::new(
            self.geometry.grid_h,
            self.geometry.grid_w,
            self.geometry.n_classes,
            self.cells.iter().map(|c| c.unwrap_or(fill)).collect(),
        )
    }
}

/// Per-cell map encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapCodec {
    /// `C` bits per cell, exactly one set.
    OneHot,
    /// `ceil(log2 C)` bits per cell holding the class index.
    BinaryLabel,
}

impl MapCodec {
    pub fn bits_per_cell(self, n_classes: usize) -> usize {
        match self {
            MapCodec::OneHot => n_classes,
            MapCodec::BinaryLabel => label_bits(n_classes),
        }
    }

    pub fn encode(self, map: &SemanticMap, geom: &MapGeometry, units: usize) -> Result<BitStream> {
        match self {
            MapCodec::OneHot => onehot_encode(map, geom, units),
            MapCodec::BinaryLabel => label_binary_encode(map, geom, units),
        }
    }

    pub fn decode(self, bits: &[bool], geom: &MapGeometry) -> Result<PartialMap> {
        match self {
            MapCodec::OneHot => onehot_decode(bits, geom),
            MapCodec::BinaryLabel => label_binary_decode(bits, geom),
        }
    }

    /// Exact probability that a cell of class `class` decodes correctly when
    /// every bit flips independently with probability `p`.
    pub fn cell_success(self, p: f64, n_classes: usize, class: usize) -> f64 {
        match self {
            MapCodec::OneHot => onehot_cell_success(p, n_classes, class),
            MapCodec::BinaryLabel => binary_cell_success(p, n_classes, class),
        }
    }

    /// Cell success averaged over a class distribution.
    pub fn mean_cell_success(self, p: f64, class_freq: &[f64]) -> f64 {
        let c = class_freq.len();
        class_freq
            .iter()
            .enumerate()
            .map(|(i, f)| f * self.cell_success(p, c, i))
            .sum()
    }
}

fn label_bits(n_classes: usize) -> usize {
    (usize::BITS - (n_classes.max(2) - 1).leading_zeros()) as usize
}

fn encode_cells(
    map: &SemanticMap,
    geom: &MapGeometry,
    units: usize,
    bits_per_cell: usize,
    mut put: impl FnMut(u8, &mut Vec<bool>),
) -> Result<BitStream> {
    geom.check_map(map)?;
    if units > geom.tiles {
        return Err(Error::domain(format!("{units} units exceed M = {}", geom.tiles)));
    }
    let mut out = Vec::with_capacity(units * geom.cells_per_tile() * bits_per_cell);
    for t in 0..units {
        for i in geom.tile_cells(t) {
            put(map.cells[i], &mut out);
        }
    }
    Ok(BitStream(out))
}

fn decode_cells(
    bits: &[bool],
    geom: &MapGeometry,
    bits_per_cell: usize,
    read: impl Fn(&[bool]) -> u8,
) -> Result<PartialMap> {
    let per_tile = geom.cells_per_tile() * bits_per_cell;
    if per_tile == 0 || bits.len() % per_tile != 0 || bits.len() / per_tile > geom.tiles {
        return Err(Error::Decode(format!(
            "bitstream of {} bits is not a whole number of {}-bit tiles (at most {})",
            bits.len(),
            per_tile,
            geom.tiles
        )));
    }
    let units = bits.len() / per_tile;
    let mut cells = vec![None; geom.n_cells()];
    let mut chunks = bits.chunks_exact(bits_per_cell);
    for t in 0..units {
        for i in geom.tile_cells(t) {
            let chunk = chunks.next().expect("length checked above");
            cells[i] = Some(read(chunk));
        }
    }
    Ok(PartialMap {
        geometry: *geom,
        cells,
    })
}

/// Emits the first `units` tiles, each cell as `C` bits with one bit set.
pub fn onehot_encode(map: &SemanticMap, geom: &MapGeometry, units: usize) -> Result<BitStream> {
    let c = geom.n_classes;
    encode_cells(map, geom, units, c, |label, out| {
        out.extend((0..c).map(|j| j == label as usize));
    })
}

/// Decodes one one-hot cell: the lowest-index set bit, or class 0 if none.
pub fn onehot_decode_cell(cell: &[bool]) -> u8 {
    cell.iter().position(|&b| b).unwrap_or(0) as u8
}

pub fn onehot_decode(bits: &[bool], geom: &MapGeometry) -> Result<PartialMap> {
    decode_cells(bits, geom, geom.n_classes, onehot_decode_cell)
}

/// Segmentation-map baseline: each cell as its class index, MSB first.
pub fn label_binary_encode(map: &SemanticMap, geom: &MapGeometry, units: usize) -> Result<BitStream> {
    let nb = label_bits(geom.n_classes);
    encode_cells(map, geom, units, nb, |label, out| {
        out.extend((0..nb).rev().map(|j| (label >> j) & 1 == 1));
    })
}

pub fn label_binary_decode(bits: &[bool], geom: &MapGeometry) -> Result<PartialMap> {
    let c = geom.n_classes;
    decode_cells(bits, geom, label_bits(c), |chunk| {
        let idx = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        // indices past the last class fall back to class 0
        if idx < c {
            idx as u8
        } else {
            0
        }
    })
}

/// Closed form for the lowest-set-bit rule: class `i` survives when its own
/// bit stays set and none of bits `0..i` turn on; class 0 additionally
/// survives when every bit ends up clear.
pub fn onehot_cell_success(p: f64, n_classes: usize, class: usize) -> f64 {
    let q = 1.0 - p;
    let mut s = q.powi(class as i32 + 1);
    if class == 0 {
        s += p * q.powi(n_classes as i32 - 1);
    }
    s
}

/// Sums over all error patterns on the `ceil(log2 C)` label bits.
pub fn binary_cell_success(p: f64, n_classes: usize, class: usize) -> f64 {
    let nb = label_bits(n_classes);
    let q = 1.0 - p;
    (0..1usize << nb)
        .filter(|pattern| {
            let received = class ^ pattern;
            let decoded = if received < n_classes { received } else { 0 };
            decoded == class
        })
        .map(|pattern| {
            let flips = pattern.count_ones() as i32;
            p.powi(flips) * q.powi(nb as i32 - flips)
        })
        .sum()
}

/// Modulation used to map SINR to bit error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Modulation {
    /// Gray-coded QPSK: `BER = Q(sqrt(γ))`.
    #[default]
    GrayQpsk,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitChannelModel {
    pub modulation: Modulation,
    pub sinr: f64,
}

/// Gaussian tail `Q(x) = erfc(x/√2)/2`.
pub fn gaussian_q(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

pub fn ber_from_sinr(m: &BitChannelModel) -> Result<f64> {
    if m.sinr.is_nan() || m.sinr < 0.0 {
        return Err(Error::domain(format!("sinr must be >= 0, got {}", m.sinr)));
    }
    let ber = match m.modulation {
        Modulation::GrayQpsk => gaussian_q(m.sinr.sqrt()),
    };
    Ok(ber.clamp(0.0, 0.5))
}

/// Flips each bit independently with probability `ber`, using the
/// [`rng::streams::TRANSPORT`] stream of `seed`.
pub fn transmit_bits(bits: &[bool], ber: f64, seed: u64) -> Result<BitStream> {
    let mut r = rng::stream(seed, rng::streams::TRANSPORT);
    transmit_bits_with(bits, ber, &mut r).map(|(out, _)| out)
}

/// Same as [`transmit_bits`] with an explicit generator; also returns the
/// number of flipped bits.
///
/// Flip positions are drawn as geometric gaps, which is distributionally
/// identical to one Bernoulli trial per bit.
pub fn transmit_bits_with(bits: &[bool], ber: f64, rng: &mut SimRng) -> Result<(BitStream, usize)> {
    if !(0.0..=0.5).contains(&ber) {
        return Err(Error::domain(format!("ber must be in [0, 0.5], got {ber}")));
    }
    let mut out = bits.to_vec();
    if ber == 0.0 || bits.is_empty() {
        return Ok((BitStream(out), 0));
    }
    let log_q = (1.0 - ber).ln();
    let n = out.len();
    let mut pos = 0usize;
    let mut flips = 0usize;
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let gap = (u.ln() / log_q).floor();
        if gap >= (n - pos) as f64 {
            break;
        }
        pos += gap as usize;
        out[pos] = !out[pos];
        flips += 1;
        pos += 1;
        if pos >= n {
            break;
        }
    }
    Ok((BitStream(out), flips))
}

/// A prompt; one private unit is one whitespace-delimited word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextUnit {
    pub text: String,
}

impl TextUnit {
    pub fn new(text: impl Into<String>) -> Self {
        TextUnit { text: text.into() }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }

    pub fn word_count(&self) -> usize {
        self.words().count()
    }

    fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let text = words.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        TextUnit { text }
    }
}

/// Encoded prompt prefix. Word lengths travel as side information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPayload {
    pub bits: BitStream,
    pub word_lengths: Vec<usize>,
}

pub const PLACEHOLDER: char = '?';

/// Encodes the first `units` words at 8 bits per character, MSB first.
pub fn text_encode(t: &TextUnit, units: usize) -> Result<TextPayload> {
    if units > 0 && t.word_count() == 0 {
        return Err(Error::domain("cannot take words from an empty prompt"));
    }
    let mut bits = Vec::new();
    let mut word_lengths = Vec::new();
    for w in t.words().take(units) {
        let bytes = w.as_bytes();
        word_lengths.push(bytes.len());
        for &byte in bytes {
            bits.extend((0..8).rev().map(|j| (byte >> j) & 1 == 1));
        }
    }
    Ok(TextPayload {
        bits: BitStream(bits),
        word_lengths,
    })
}

/// Maps 8-bit groups back to characters. Anything that is not a visible ASCII
/// character becomes [`PLACEHOLDER`], so word boundaries survive corruption.
pub fn text_decode(bits: &[bool], word_lengths: &[usize]) -> Result<TextUnit> {
    let total: usize = word_lengths.iter().sum();
    if bits.len() != 8 * total {
        return Err(Error::Decode(format!(
            "expected {} text bits, got {}",
            8 * total,
            bits.len()
        )));
    }
    let mut bytes = bits.chunks_exact(8).map(|c| c.iter().fold(0u8, |a, &b| (a << 1) | b as u8));
    let words: Vec<String> = word_lengths
        .iter()
        .map(|&n| {
            (&mut bytes)
                .take(n)
                .map(|b| if b.is_ascii_graphic() { b as char } else { PLACEHOLDER })
                .collect()
        })
        .collect();
    Ok(TextUnit::from_words(&words))
}

/// Receiver-side word list.
#[derive(Debug, Clone)]
pub struct Dictionary {
    words: Vec<String>,
    index: HashSet<String>,
}

impl Dictionary {
    /// One lowercase word per line; blank lines are ignored.
    pub fn parse(src: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut index = HashSet::new();
        for (lineno, line) in src.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() {
                continue;
            }
            if w.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::config(format!(
                    "dictionary line {}: {w:?} is not a single lowercase word",
                    lineno + 1
                )));
            }
            if !index.insert(w.to_string()) {
                return Err(Error::config(format!("dictionary line {}: duplicate {w:?}", lineno + 1)));
            }
            words.push(w.to_string());
        }
        if words.is_empty() {
            return Err(Error::config("dictionary is empty"));
        }
        Ok(Dictionary { words, index })
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Bundled vocabulary covering the default prompts.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/dictionary.txt")).expect("bundled dictionary is valid")
    }

    pub fn contains(&self, w: &str) -> bool {
        self.index.contains(w)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Largest edit distance [`spell_correct`] will repair.
pub const MAX_CORRECTION_DISTANCE: usize = 2;

/// Replaces out-of-dictionary words by their nearest dictionary word
/// (Levenshtein, first in dictionary order on ties) when it is at most
/// [`MAX_CORRECTION_DISTANCE`] edits away.
pub fn spell_correct(t: &TextUnit, dict: &Dictionary) -> TextUnit {
    let words: Vec<String> = t.words().map(|w| correct_word(w, dict)).collect();
    TextUnit::from_words(&words)
}

fn correct_word(w: &str, dict: &Dictionary) -> String {
    if dict.contains(w) {
        return w.to_string();
    }
    let mut best: Option<(usize, &str)> = None;
    for cand in dict.words() {
        // cheap length bound before the full distance
        if cand.len().abs_diff(w.len()) > MAX_CORRECTION_DISTANCE {
            continue;
        }
        let d = strsim::levenshtein(w, cand);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, cand));
        }
    }
    match best {
        Some((d, cand)) if d <= MAX_CORRECTION_DISTANCE => cand.to_string(),
        _ => w.to_string(),
    }
}

/// Scene classes ordered by how much of a street scene they usually cover.
pub const SCENE_CLASSES: [&str; 8] = [
    "road", "building", "sky", "vegetation", "sidewalk", "vehicle", "pole", "person",
];

/// Seeded street-scene segmentation map: sky over buildings over road, with
/// sidewalks, vegetation, vehicles, poles and pedestrians. Label `i` is
/// [`SCENE_CLASSES`]`[i]`, clamped to `n_classes − 1`.
pub fn synthetic_scene_map(geom: &MapGeometry, seed: u64) -> SemanticMap {
    let (h, w) = (geom.grid_h, geom.grid_w);
    let top = (geom.n_classes - 1) as u8;
    let label = |class: u8| class.min(top);
    let mut r = rng::stream(seed, rng::streams::SCENE);
    let frac = |r: &mut SimRng, lo: f64, hi: f64, n: usize| ((r.gen_range(lo..hi)) * n as f64) as usize;

    let sky_end = frac(&mut r, 0.12, 0.2, h);
    let horizon = frac(&mut r, 0.42, 0.5, h).max(sky_end + 1).min(h);
    let mut cells = vec![0u8; h * w];
    for row in 0..h {
        for col in 0..w {
            cells[row * w + col] = if row < sky_end {
                label(2)
            } else if row < horizon {
                label(1)
            } else {
                label(0)
            };
        }
    }
    let paint = |cells: &mut Vec<u8>, r0: usize, r1: usize, c0: usize, c1: usize, class: u8| {
        for row in r0.min(h)..r1.min(h) {
            for col in c0.min(w)..c1.min(w) {
                cells[row * w + col] = label(class);
            }
        }
    };

    // tree canopies along the building line
    for _ in 0..r.gen_range(2..4) {
        let c0 = r.gen_range(0..w);
        let cw = frac(&mut r, 0.08, 0.16, w).max(1);
        let r0 = frac(&mut r, 0.22, 0.32, h);
        paint(&mut cells, r0, horizon, c0, c0 + cw, 3);
    }
    // sidewalks widening towards the viewer
    for row in horizon..h {
        let depth = (row - horizon + 1) as f64 / (h - horizon).max(1) as f64;
        let sw = ((0.05 + 0.1 * depth) * w as f64) as usize;
        paint(&mut cells, row, row + 1, 0, sw, 4);
        paint(&mut cells, row, row + 1, w - sw.min(w), w, 4);
    }
    // vehicles on the road
    for _ in 0..r.gen_range(2..5) {
        let vh = frac(&mut r, 0.06, 0.1, h).max(1);
        let vw = frac(&mut r, 0.08, 0.14, w).max(1);
        let r0 = r.gen_range(horizon..h.saturating_sub(vh).max(horizon + 1));
        let c0 = r.gen_range((w / 6)..(5 * w / 6).max(w / 6 + 1));
        paint(&mut cells, r0, r0 + vh, c0, c0 + vw, 5);
    }
    // poles
    for _ in 0..r.gen_range(1..3) {
        let c0 = r.gen_range(0..w);
        let r0 = frac(&mut r, 0.2, 0.35, h);
        paint(&mut cells, r0, horizon + h / 8, c0, c0 + 1, 6);
    }
    // pedestrians on the sidewalk edges
    for _ in 0..r.gen_range(1..3) {
        let ph = frac(&mut r, 0.06, 0.1, h).max(1);
        let r0 = r.gen_range(horizon..h.saturating_sub(ph).max(horizon + 1));
        let c0 = if r.gen_bool(0.5) { r.gen_range(0..(w / 10).max(1)) } else { w - 1 - r.gen_range(0..(w / 10).max(1)) };
        paint(&mut cells, r0, r0 + ph, c0, c0 + 1, 7);
    }

    SemanticMap {
        grid_h: h,
        grid_w: w,
        n_classes: geom.n_classes,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop, prop_assert_eq, proptest, Strategy};

    fn small_map() -> (SemanticMap, MapGeometry) {
        let map = SemanticMap::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let geom = MapGeometry::of_map(&map, 1).unwrap();
        (map, geom)
    }

    #[test]
    fn default_geometry_tiles() {
        let g = MapGeometry::new(48, 64, 8, 16).unwrap();
        assert_eq!((g.tile_rows, g.tile_cols), (4, 4));
        assert_eq!(g.cells_per_tile(), 192);
        let all: HashSet<usize> = (0..16).flat_map(|t| g.tile_cells(t).collect::<Vec<_>>()).collect();
        assert_eq!(all.len(), 48 * 64);
        // half the budget is about 3 Kb of one-hot bits per 1/8 of the map... full map is 24 Kb
        assert_eq!(8 * g.cells_per_tile() * g.n_classes / 4, 3072);
    }

    #[test]
    fn indivisible_grid_is_config_error() {
        assert!(MapGeometry::new(5, 7, 8, 4).unwrap_err().is_config());
        assert!(MapGeometry::new(4, 4, 8, 0).is_err());
    }

    #[test]
    fn zero_budget_empty_stream() {
        let (map, geom) = small_map();
        assert!(onehot_encode(&map, &geom, 0).unwrap().is_empty());
    }

    #[test]
    fn onehot_unrolled() {
        let (map, geom) = small_map();
        let bits = onehot_encode(&map, &geom, 1).unwrap();
        assert_eq!(bits, BitStream::from_str01("1000 0100 0010 0001"));
        let back = onehot_decode(&bits, &geom).unwrap().complete(0).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn onehot_cell_rule() {
        assert_eq!(onehot_decode_cell(&BitStream::from_str01("0010")), 2);
        assert_eq!(onehot_decode_cell(&BitStream::from_str01("0110")), 1);
        assert_eq!(onehot_decode_cell(&BitStream::from_str01("0000")), 0);
    }

    #[test]
    fn onehot_success_matches_pattern_enumeration() {
        // enumerate all 2^C flip patterns and apply the decoder directly
        for c in [2usize, 4, 8] {
            for p in [0.0f64, 1e-2, 0.1, 0.3] {
                for class in 0..c {
                    let mut total = 0.0;
                    for pattern in 0..1usize << c {
                        let cell: Vec<bool> = (0..c).map(|j| (j == class) ^ ((pattern >> j) & 1 == 1)).collect();
                        if onehot_decode_cell(&cell) as usize == class {
                            let k = pattern.count_ones() as i32;
                            total += p.powi(k) * (1.0 - p).powi(c as i32 - k);
                        }
                    }
                    assert_relative_eq!(onehot_cell_success(p, c, class), total, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn onehot_cell_error_monte_carlo() {
        let p = 0.05;
        let c = 8;
        let mut r = rng::stream(11, 0);
        let n = 100_000;
        for class in [0usize, 3, 7] {
            let mut cell = vec![false; c];
            let mut errors = 0;
            for _ in 0..n {
                for (j, b) in cell.iter_mut().enumerate() {
                    *b = (j == class) ^ r.gen_bool(p);
                }
                if onehot_decode_cell(&cell) as usize != class {
                    errors += 1;
                }
            }
            let want = 1.0 - onehot_cell_success(p, c, class);
            let se = (want * (1.0 - want) / n as f64).sqrt();
            let got = errors as f64 / n as f64;
            assert!((got - want).abs() < 3.0 * se.max(1e-6), "class {class}: {got} vs {want}");
        }
    }

    #[test]
    fn binary_label_bits() {
        let map = SemanticMap::new(1, 1, 8, vec![5]).unwrap();
        let geom = MapGeometry::of_map(&map, 1).unwrap();
        assert_eq!(label_binary_encode(&map, &geom, 1).unwrap(), BitStream::from_str01("101"));
        // any single flip changes the index
        for j in 0..3 {
            let mut bits = BitStream::from_str01("101");
            bits.0[j] = !bits.0[j];
            let got = label_binary_decode(&bits, &geom).unwrap();
            assert_ne!(got.cells[0], Some(5));
        }
        assert_relative_eq!(binary_cell_success(0.01, 8, 5), 0.99f64.powi(3), max_relative = 1e-12);
    }

    #[test]
    fn binary_out_of_range_index_falls_back() {
        let map = SemanticMap::new(1, 1, 5, vec![4]).unwrap();
        let geom = MapGeometry::of_map(&map, 1).unwrap();
        let got = label_binary_decode(&BitStream::from_str01("111"), &geom).unwrap();
        assert_eq!(got.cells[0], Some(0));
    }

    #[test]
    fn decode_length_mismatch() {
        let (_, geom) = small_map();
        assert!(matches!(onehot_decode(&[true; 15], &geom), Err(Error::Decode(_))));
        assert!(matches!(onehot_decode(&[true; 32], &geom), Err(Error::Decode(_))));
        assert!(label_binary_decode(&[true; 7], &geom).is_err());
    }

    #[test]
    fn partial_decode_marks_absent_tiles() {
        let geom = MapGeometry::new(4, 4, 3, 4).unwrap();
        let map = SemanticMap::new(4, 4, 3, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
        let bits = onehot_encode(&map, &geom, 2).unwrap();
        assert_eq!(bits.len(), 2 * 4 * 3);
        let got = onehot_decode(&bits, &geom).unwrap();
        assert_eq!(got.received_tiles(), 2);
        assert_eq!(got.cells.iter().filter(|c| c.is_none()).count(), 8);
        assert_eq!(got.correct_cells(&map), 8);
    }

    #[test]
    fn text_round_trip() {
        let t = TextUnit::new("rainy road");
        let p = text_encode(&t, 2).unwrap();
        assert_eq!(p.bits.len(), 8 * 9);
        assert_eq!(text_decode(&p.bits, &p.word_lengths).unwrap(), t);
        let empty = text_encode(&t, 0).unwrap();
        assert!(empty.bits.is_empty());
        assert_eq!(text_decode(&empty.bits, &empty.word_lengths).unwrap().text, "");
        assert!(text_encode(&TextUnit::new("   "), 1).is_err());
    }

    #[test]
    fn text_prefix_only() {
        let t = TextUnit::new("wet road at night");
        let p = text_encode(&t, 2).unwrap();
        assert_eq!(text_decode(&p.bits, &p.word_lengths).unwrap().text, "wet road");
    }

    #[test]
    fn flipped_high_bit_becomes_placeholder() {
        let p = text_encode(&TextUnit::new("r"), 1).unwrap();
        let mut bits = p.bits.clone();
        bits.0[0] = !bits.0[0];
        // 0x72 ^ 0x80 = 0xF2
        let byte = bits.iter().fold(0u8, |a, &b| (a << 1) | b as u8);
        assert_eq!(byte, 0xF2);
        assert_eq!(text_decode(&bits, &p.word_lengths).unwrap().text, "?");
    }

    #[test]
    fn ber_endpoints() {
        let m = |sinr| BitChannelModel {
            modulation: Modulation::GrayQpsk,
            sinr,
        };
        assert_eq!(ber_from_sinr(&m(0.0)).unwrap(), 0.5);
        assert!(ber_from_sinr(&m(1e6)).unwrap() < 1e-300);
        assert_eq!(ber_from_sinr(&m(f64::INFINITY)).unwrap(), 0.0);
        assert!(ber_from_sinr(&m(-1.0)).unwrap_err().to_string().contains("domain"));
    }

    #[test]
    fn ber_at_sinr_four_matches_quadrature() {
        // Q(2) by Simpson integration of the Gaussian density on [2, 12]
        let n = 20_000;
        let (a, b) = (2.0f64, 12.0f64);
        let h = (b - a) / n as f64;
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = phi(a) + phi(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * phi(x);
        }
        let q2 = s * h / 3.0;
        let got = ber_from_sinr(&BitChannelModel {
            modulation: Modulation::GrayQpsk,
            sinr: 4.0,
        })
        .unwrap();
        assert_relative_eq!(got, q2, max_relative = 1e-9);
        assert_relative_eq!(got, 0.02275, max_relative = 1e-3);
    }

    #[test]
    fn transmit_identity_and_determinism() {
        let bits = vec![true, false, true, true];
        assert_eq!(transmit_bits(&bits, 0.0, 3).unwrap().0, bits);
        let long: Vec<bool> = (0..10_000).map(|i| i % 3 == 0).collect();
        assert_eq!(transmit_bits(&long, 0.1, 9).unwrap(), transmit_bits(&long, 0.1, 9).unwrap());
        assert_ne!(transmit_bits(&long, 0.1, 9).unwrap(), transmit_bits(&long, 0.1, 10).unwrap());
        assert!(transmit_bits(&bits, 0.6, 1).is_err());
    }

    #[test]
    fn flip_rate_half() {
        let n = 1_000_000;
        let bits = vec![false; n];
        let out = transmit_bits(&bits, 0.5, 1).unwrap();
        let frac = out.iter().filter(|&&b| b).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.0015, "{frac}");
    }

    #[test]
    fn flip_rate_small() {
        let n = 1_000_000;
        let bits = vec![true; n];
        for ber in [1e-3, 0.02, 0.2] {
            let (out, flips) = transmit_bits_with(&bits, ber, &mut rng::stream(5, 0)).unwrap();
            assert_eq!(flips, out.iter().filter(|&&b| !b).count());
            let se = (ber * (1.0 - ber) / n as f64).sqrt();
            assert!((flips as f64 / n as f64 - ber).abs() < 3.0 * se, "ber {ber}");
        }
    }

    fn dict() -> Dictionary {
        Dictionary::parse("rainy\nroad\nrainz_not\nwet\n").unwrap()
    }

    #[test]
    fn spell_correction_cases() {
        let d = dict();
        assert_eq!(spell_correct(&TextUnit::new("rainy"), &d).text, "rainy");
        assert_eq!(spell_correct(&TextUnit::new("rainz"), &d).text, "rainy");
        assert_eq!(spell_correct(&TextUnit::new("xqzvw"), &d).text, "xqzvw");
        assert_eq!(spell_correct(&TextUnit::new("wot rood"), &d).text, "wet road");
    }

    #[test]
    fn spell_correction_tie_uses_dictionary_order() {
        let d = Dictionary::parse("cat\ncar\n").unwrap();
        assert_eq!(spell_correct(&TextUnit::new("cax"), &d).text, "cat");
        let d = Dictionary::parse("car\ncat\n").unwrap();
        assert_eq!(spell_correct(&TextUnit::new("cax"), &d).text, "car");
    }

    #[test]
    fn dictionary_validation() {
        assert!(Dictionary::parse("").is_err());
        assert!(Dictionary::parse("road\nroad\n").is_err());
        assert!(Dictionary::parse("Road\n").is_err());
        assert!(!Dictionary::builtin().is_empty());
    }

    #[test]
    fn scene_map_is_seeded_and_skewed() {
        let g = MapGeometry::new(48, 64, 8, 16).unwrap();
        let a = synthetic_scene_map(&g, 1);
        assert_eq!(a, synthetic_scene_map(&g, 1));
        assert_ne!(a, synthetic_scene_map(&g, 2));
        let f = a.class_frequencies();
        assert!(f[0] > 0.25 && f[0] > f[5], "{f:?}");
        assert!(SemanticMap::new(48, 64, 8, a.cells.clone()).is_ok());
        let tiny = MapGeometry::new(4, 4, 3, 1).unwrap();
        assert!(synthetic_scene_map(&tiny, 5).cells.iter().all(|&c| c < 3));
    }

    fn arb_map() -> impl Strategy<Value = SemanticMap> {
        (1usize..4, 1usize..4, 2usize..10).prop_flat_map(|(tr, tc, c)| {
            let (h, w) = (tr * 2, tc * 3);
            proptest::collection::vec(0..c as u8, h * w)
                .prop_map(move |cells| SemanticMap::new(h, w, c, cells).unwrap())
        })
    }

    proptest! {
        #[test]
        fn codecs_are_identity_at_zero_ber(map in arb_map(), tiles in prop::sample::select(vec![1usize, 2, 3, 6])) {
            let geom = match MapGeometry::of_map(&map, tiles) {
                Ok(g) => g,
                Err(_) => return Ok(()),
            };
            for codec in [MapCodec::OneHot, MapCodec::BinaryLabel] {
                let bits = codec.encode(&map, &geom, tiles).unwrap();
                prop_assert_eq!(bits.len(), tiles * geom.cells_per_tile() * codec.bits_per_cell(map.n_classes));
                let sent = transmit_bits(&bits, 0.0, 1).unwrap();
                prop_assert_eq!(codec.decode(&sent, &geom).unwrap().complete(0).unwrap(), map.clone());
            }
        }

        #[test]
        fn text_identity_and_length(words in proptest::collection::vec("[a-z]{1,9}", 0..6), extra in 0usize..3) {
            let t = TextUnit::new(words.join(" "));
            let units = words.len() + extra;
            let p = text_encode(&t, units).unwrap_or(TextPayload { bits: BitStream::default(), word_lengths: vec![] });
            let chars: usize = words.iter().map(|w| w.len()).sum();
            prop_assert_eq!(p.bits.len(), 8 * chars);
            prop_assert_eq!(text_decode(&p.bits, &p.word_lengths).unwrap(), t);
        }
    }

    #[test]
    fn onehot_error_monotone_in_flip_rate() {
        let geom = MapGeometry::new(48, 64, 8, 16).unwrap();
        let map = synthetic_scene_map(&geom, 3);
        let bits = onehot_encode(&map, &geom, 16).unwrap();
        let mut last = 0usize;
        for (i, p) in [0.0, 0.005, 0.02, 0.08, 0.2, 0.5].into_iter().enumerate() {
            let mut errors = 0;
            for rep in 0..4 {
                let sent = transmit_bits(&bits, p, 100 + rep + 10 * i as u64).unwrap();
                let got = onehot_decode(&sent, &geom).unwrap();
                errors += map.cells.len() - got.correct_cells(&map);
            }
            assert!(errors >= last, "p = {p}");
            last = errors;
        }
    }

    #[test]
    fn spell_correction_never_hurts_single_edits() {
        // aggregate character errors over single-substitution corruptions
        let d = Dictionary::builtin();
        let mut r = rng::stream(17, 0);
        let letters: Vec<char> = ('a'..='z').collect();
        let (mut before, mut after) = (0usize, 0usize);
        for _ in 0..2000 {
            let truth = &d.words()[r.gen_range(0..d.len())];
            let mut chars: Vec<char> = truth.chars().collect();
            let i = r.gen_range(0..chars.len());
            chars[i] = letters[r.gen_range(0..26)];
            let corrupted: String = chars.iter().collect();
            let fixed = spell_correct(&TextUnit::new(corrupted.clone()), &d).text;
            before += strsim::levenshtein(&corrupted, truth);
            after += strsim::levenshtein(&fixed, truth);
        }
        assert!(after <= before, "{after} > {before}");
        assert!(after * 4 < before, "correction should repair most single edits");
    }
}
