//! Weight codecs and the upload wire format.
//!
//! Two per-layer codecs are provided: range-based asymmetric uniform
//! quantization and a 1-D k-means codebook. Both produce indices in
//! `[0, 2^bits)` that are bit-packed per layer.
//!
//! # Wire format (version 1, little-endian)
//!
//! ```text
//! header   magic "FSQP" | version u16 | scheme u8 | bits u8 | layer count u32
//! layer    name len u16 | name (utf-8) | element count u32
//!          aux:  uniform -> w_min f32, w_max f32
//!                kmeans  -> 2^bits f32 centroids, unused slots = canonical NaN
//!          indices packed LSB-first at `bits` per element, padded to a byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layer, LayeredParams};

pub const MAGIC: [u8; 4] = *b"FSQP";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 12;
pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 16;

const PAD_BITS: u32 = 0x7fc0_0000;

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )))
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::data(format!(
            "non-finite weight {} at {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    Kmeans,
}

impl Scheme {
    fn code(self) -> u8 {
        match self {
            Scheme::Uniform => 0,
            Scheme::Kmeans => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scheme::Uniform),
            1 => Some(Scheme::Kmeans),
            _ => None,
        }
    }
}

/// Uniform codec parameters for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformCodec {
    pub w_min: f32,
    pub w_max: f32,
    pub bits: u8,
}

impl UniformCodec {
    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    /// Reconstruction step `(w_max - w_min) / (2^bits - 1)`.
    pub fn step(&self) -> f64 {
        (self.w_max as f64 - self.w_min as f64) / (self.levels() - 1) as f64
    }

    pub fn encode(&self, w: f32) -> u32 {
        let range = self.w_max as f64 - self.w_min as f64;
        if range <= 0.0 {
            return 0;
        }
        let steps = (self.levels() - 1) as f64;
        // f64::round is half-away-from-zero.
        let t = ((w as f64 - self.w_min as f64) / range * steps).round();
        t.clamp(0.0, steps) as u32
    }

    pub fn decode(&self, index: u32) -> f32 {
        let range = self.w_max as f64 - self.w_min as f64;
        if range <= 0.0 {
            return self.w_min;
        }
        let steps = (self.levels() - 1) as f64;
        (self.w_min as f64 + index as f64 * range / steps) as f32
    }
}

/// Sorted, strictly increasing reconstruction alphabet for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansCodebook {
    pub centroids: Vec<f32>,
    pub bits: u8,
}

impl KMeansCodebook {
    pub fn new(centroids: Vec<f32>, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if centroids.is_empty() || centroids.len() > 1usize << bits {
            return Err(Error::data(format!(
                "codebook of {} centroids does not fit {bits} bits",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) || centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data(
                "centroids must be finite and strictly increasing",
            ));
        }
        Ok(Self { centroids, bits })
    }

    /// Index of the nearest centroid; an exact midpoint goes to the lower index.
    pub fn nearest(&self, w: f32) -> u32 {
        let c = &self.centroids;
        // First centroid >= w; the answer is it or its predecessor.
        let hi = c.partition_point(|&x| x < w);
        if hi == 0 {
            return 0;
        }
        if hi == c.len() {
            return (c.len() - 1) as u32;
        }
        let below = w as f64 - c[hi - 1] as f64;
        let above = c[hi] as f64 - w as f64;
        if below <= above {
            (hi - 1) as u32
        } else {
            hi as u32
        }
    }

    /// Largest gap between adjacent centroids.
    pub fn max_gap(&self) -> f64 {
        self.centroids
            .windows(2)
            .map(|w| w[1] as f64 - w[0] as f64)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Uniform(UniformCodec),
    Kmeans(KMeansCodebook),
}

impl Codec {
    pub fn scheme(&self) -> Scheme {
        match self {
            Codec::Uniform(_) => Scheme::Uniform,
            Codec::Kmeans(_) => Scheme::Kmeans,
        }
    }

    pub fn bits(&self) -> u8 {
        match self {
            Codec::Uniform(u) => u.bits,
            Codec::Kmeans(k) => k.bits,
        }
    }

    /// Number of addressable reconstruction values.
    fn alphabet_len(&self) -> usize {
        match self {
            Codec::Uniform(u) => u.levels() as usize,
            Codec::Kmeans(k) => k.centroids.len(),
        }
    }

    pub fn aux_bytes(&self) -> usize {
        match self {
            Codec::Uniform(_) => 8,
            Codec::Kmeans(k) => 4 << k.bits,
        }
    }
}

/// Fixed-width unsigned integers packed LSB-first into bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedIndices {
    bits: u8,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedIndices {
    pub fn byte_len(len: usize, bits: u8) -> usize {
        (len * bits as usize).div_ceil(8)
    }

    pub fn pack(values: &[u32], bits: u8) -> Self {
        debug_assert!((1..=32).contains(&bits));
        let mut bytes = Vec::with_capacity(Self::byte_len(values.len(), bits));
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        for &v in values {
            debug_assert!(bits == 32 || v < 1u32 << bits);
            acc |= (v as u64) << filled;
            filled += bits as u32;
            while filled >= 8 {
                bytes.push(acc as u8);
                acc >>= 8;
                filled -= 8;
            }
        }
        if filled > 0 {
            bytes.push(acc as u8);
        }
        Self {
            bits,
            len: values.len(),
            bytes,
        }
    }

    fn from_raw(bytes: Vec<u8>, len: usize, bits: u8) -> Self {
        Self { bits, len, bytes }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> u32 {
        assert!(i < self.len, "index {i} out of {}", self.len);
        let bit = i * self.bits as usize;
        let mut acc: u64 = 0;
        for (k, byte) in self.bytes[bit / 8..].iter().take(5).enumerate() {
            acc |= (*byte as u64) << (8 * k);
        }
        let mask = if self.bits == 32 {
            u32::MAX as u64
        } else {
            (1u64 << self.bits) - 1
        };
        ((acc >> (bit % 8)) & mask) as u32
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.iter().collect()
    }

    /// Bits past the last element in the final byte are zero.
    fn padding_is_clear(&self) -> bool {
        let used = self.len * self.bits as usize;
        match (used % 8, self.bytes.last()) {
            (0, _) | (_, None) => true,
            (r, Some(&last)) => last >> r == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub indices: PackedIndices,
    pub codec: Codec,
}

impl QuantizedLayer {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub scheme: Scheme,
    pub bits: u8,
    pub layers: Vec<QuantizedLayer>,
}

/// Uniform (asymmetric, range-based) quantization of one layer.
pub fn quant_uniform(name: &str, values: &[f32], bits: u8) -> Result<QuantizedLayer> {
    check_bits(bits)?;
    check_finite(values)?;
    let (w_min, w_max) = values
        .iter()
        .fold(None, |acc: Option<(f32, f32)>, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .unwrap_or((0.0, 0.0));
    let codec = UniformCodec { w_min, w_max, bits };
    let indices: Vec<u32> = values.iter().map(|&w| codec.encode(w)).collect();
    Ok(QuantizedLayer {
        name: name.to_string(),
        indices: PackedIndices::pack(&indices, bits),
        codec: Codec::Uniform(codec),
    })
}

pub fn dequant_uniform(codec: &UniformCodec, indices: &PackedIndices) -> Vec<f32> {
    indices.iter().map(|i| codec.decode(i)).collect()
}

/// Tunables for [`kmeans_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Convergence threshold as a fraction of the data range.
    pub rel_tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
        }
    }
}

/// Lloyd's algorithm on 1-D data with `2^bits` clusters.
///
/// `tol` is an absolute bound on the largest centroid move per iteration.
pub fn kmeans_fit(values: &[f32], bits: u8, max_iters: usize, tol: f64) -> Result<KMeansCodebook> {
    kmeans_fit_traced(values, bits, max_iters, tol).map(|(cb, _)| cb)
}

/// [`kmeans_fit`] with the default options, tolerance scaled to the data range.
pub fn kmeans_fit_default(
    values: &[f32],
    bits: u8,
    opts: &KMeansOptions,
) -> Result<KMeansCodebook> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = if hi > lo { hi - lo } else { 0.0 };
    kmeans_fit(values, bits, opts.max_iters, opts.rel_tol * range)
}

/// Sum of squared distances to the nearest centroid, plus per-cluster stats.
struct Assignment {
    objective: f64,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

/// Assign sorted data to sorted centroids by midpoint boundaries.
fn assign_sorted(sorted: &[f64], centroids: &[f64]) -> Assignment {
    let k = centroids.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut objective = 0.0;
    let mut j = 0;
    for &x in sorted {
        while j + 1 < k && x > 0.5 * (centroids[j] + centroids[j + 1]) {
            j += 1;
        }
        sums[j] += x;
        counts[j] += 1;
        objective += (x - centroids[j]).powi(2);
    }
    Assignment {
        objective,
        sums,
        counts,
    }
}

/// As [`kmeans_fit`], also returning the objective after every assignment step.
pub fn kmeans_fit_traced(
    values: &[f32],
    bits: u8,
    max_iters: usize,
    tol: f64,
) -> Result<(KMeansCodebook, Vec<f64>)> {
    check_bits(bits)?;
    check_finite(values)?;
    if values.is_empty() {
        return Err(Error::data("k-means needs at least one distinct value"));
    }
    let k = 1usize << bits;
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);

    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= k {
        let centroids = distinct.iter().map(|&v| v as f32).collect();
        return Ok((KMeansCodebook::new(centroids, bits)?, vec![0.0]));
    }

    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..k)
        .map(|i| sorted[(((2 * i + 1) * n) / (2 * k)).min(n - 1)])
        .collect();
    let mut trace: Vec<f64> = Vec::new();

    for _ in 0..max_iters {
        let a = assign_sorted(&sorted, &centroids);
        if let Some(&prev) = trace.last() {
            debug_assert!(
                a.objective <= prev + 1e-12 * prev.max(1e-300),
                "k-means objective rose: {prev} -> {}",
                a.objective
            );
        }
        trace.push(a.objective);

        let mut next: Vec<f64> = (0..k)
            .map(|j| {
                if a.counts[j] > 0 {
                    a.sums[j] / a.counts[j] as f64
                } else {
                    f64::NAN
                }
            })
            .collect();
        reseed_empty(&sorted, &centroids, &mut next);
        next.sort_by(f64::total_cmp);

        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }

    let final_obj = assign_sorted(&sorted, &centroids).objective;
    trace.push(final_obj);

    let mut out: Vec<f32> = centroids.iter().map(|&c| c as f32).collect();
    out.dedup();
    Ok((KMeansCodebook::new(out, bits)?, trace))
}

/// Move each empty centroid (NaN in `next`) onto the data point farthest from
/// its current centroid, skipping values already used as centroids.
fn reseed_empty(sorted: &[f64], current: &[f64], next: &mut [f64]) {
    let empties: Vec<usize> = (0..next.len()).filter(|&j| next[j].is_nan()).collect();
    if empties.is_empty() {
        return;
    }
    let k = current.len();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(sorted.len());
    let mut j = 0;
    for (i, &x) in sorted.iter().enumerate() {
        while j + 1 < k && x > 0.5 * (current[j] + current[j + 1]) {
            j += 1;
        }
        dist.push(((x - current[j]).abs(), i));
    }
    // Farthest first; ties resolved by position for determinism.
    dist.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut candidates = dist.into_iter().map(|(_, i)| sorted[i]);
    for e in empties {
        let pick = candidates.find(|x| !next.iter().any(|c| c == x));
        next[e] = pick.unwrap_or(current[e]);
    }
}

pub fn quant_kmeans(
    name: &str,
    values: &[f32],
    codebook: &KMeansCodebook,
) -> Result<QuantizedLayer> {
    check_finite(values)?;
    let indices: Vec<u32> = values.iter().map(|&w| codebook.nearest(w)).collect();
    Ok(QuantizedLayer {
        name: name.to_string(),
        indices: PackedIndices::pack(&indices, codebook.bits),
        codec: Codec::Kmeans(codebook.clone()),
    })
}

pub fn dequant_kmeans(codebook: &KMeansCodebook, indices: &PackedIndices) -> Result<Vec<f32>> {
    indices
        .iter()
        .enumerate()
        .map(|(i, idx)| {
            codebook
                .centroids
                .get(idx as usize)
                .copied()
                .ok_or_else(|| {
                    Error::corrupt(
                        0,
                        format!(
                            "index {idx} at position {i} exceeds codebook of {}",
                            codebook.centroids.len()
                        ),
                    )
                })
        })
        .collect()
}

pub fn dequant_layer(q: &QuantizedLayer) -> Result<Vec<f32>> {
    match &q.codec {
        Codec::Uniform(u) => Ok(dequant_uniform(u, &q.indices)),
        Codec::Kmeans(k) => dequant_kmeans(k, &q.indices),
    }
}

/// Codec selection for a whole model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub scheme: Scheme,
    pub bits: u8,
    pub kmeans: KMeansOptions,
}

impl QuantSpec {
    pub fn new(scheme: Scheme, bits: u8) -> Self {
        Self {
            scheme,
            bits,
            kmeans: KMeansOptions::default(),
        }
    }
}

/// Quantize every layer independently.
pub fn quantize_model(p: &LayeredParams, spec: &QuantSpec) -> Result<QuantizedModel> {
    check_bits(spec.bits)?;
    let layers = p
        .layers()
        .iter()
        .map(|l| match spec.scheme {
            Scheme::Uniform => quant_uniform(&l.name, &l.values, spec.bits),
            Scheme::Kmeans if l.values.is_empty() => Ok(QuantizedLayer {
                name: l.name.clone(),
                indices: PackedIndices::pack(&[], spec.bits),
                codec: Codec::Kmeans(KMeansCodebook::new(vec![0.0], spec.bits)?),
            }),
            Scheme::Kmeans => {
                let cb = kmeans_fit_default(&l.values, spec.bits, &spec.kmeans)?;
                quant_kmeans(&l.name, &l.values, &cb)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        scheme: spec.scheme,
        bits: spec.bits,
        layers,
    })
}

pub fn dequantize_model(q: &QuantizedModel) -> Result<LayeredParams> {
    let layers = q
        .layers
        .iter()
        .map(|l| {
            Ok(Layer {
                name: l.name.clone(),
                values: dequant_layer(l)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LayeredParams::new(layers)
}

/// `(weight_bytes, aux_bytes)`: packed indices vs codec metadata.
pub fn payload_size(q: &QuantizedModel) -> (usize, usize) {
    q.layers.iter().fold((0, 0), |(w, a), l| {
        (
            w + PackedIndices::byte_len(l.len(), l.codec.bits()),
            a + l.codec.aux_bytes(),
        )
    })
}

/// Bytes spent on framing: header plus per-layer name and count fields.
pub fn framing_bytes(q: &QuantizedModel) -> usize {
    HEADER_BYTES + q.layers.iter().map(|l| 2 + l.name.len() + 4).sum::<usize>()
}

/// Size of the same model sent as raw 32-bit floats.
pub fn full_precision_bytes(p: &LayeredParams) -> usize {
    4 * p.total_len()
}

pub fn serialize_payload(q: &QuantizedModel) -> Result<Vec<u8>> {
    check_bits(q.bits)?;
    let (w, a) = payload_size(q);
    let mut out = Vec::with_capacity(framing_bytes(q) + w + a);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(q.scheme.code());
    out.push(q.bits);
    out.extend_from_slice(&(q.layers.len() as u32).to_le_bytes());
    for l in &q.layers {
        if l.codec.scheme() != q.scheme || l.codec.bits() != q.bits || l.indices.bits() != q.bits {
            return Err(Error::config(format!(
                "layer `{}` codec does not match the model scheme",
                l.name
            )));
        }
        let name_len = u16::try_from(l.name.len())
            .map_err(|_| Error::config(format!("layer name too long: {}", l.name.len())))?;
        let count = u32::try_from(l.len())
            .map_err(|_| Error::config(format!("layer `{}` too large", l.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(l.name.as_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        match &l.codec {
            Codec::Uniform(u) => {
                out.extend_from_slice(&u.w_min.to_le_bytes());
                out.extend_from_slice(&u.w_max.to_le_bytes());
            }
            Codec::Kmeans(k) => {
                for slot in 0..1usize << k.bits {
                    let bits = k.centroids.get(slot).map_or(PAD_BITS, |c| c.to_bits());
                    out.extend_from_slice(&bits.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(l.indices.as_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32_bits(&mut self, what: &str) -> Result<u32> {
        self.u32(what)
    }
}

pub fn deserialize_payload(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::corrupt(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::corrupt(4, format!("unsupported version {version}")));
    }
    let scheme_code = r.u8("scheme")?;
    let scheme = Scheme::from_code(scheme_code)
        .ok_or_else(|| Error::corrupt(6, format!("unknown scheme {scheme_code}")))?;
    let bits = r.u8("bits")?;
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::corrupt(7, format!("bits {bits} out of range")));
    }
    let count = r.u32("layer count")? as usize;

    let mut layers: Vec<QuantizedLayer> = Vec::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| Error::corrupt(name_at + 2, "layer name is not utf-8"))?
            .to_string();
        if layers.iter().any(|l| l.name == name) {
            return Err(Error::corrupt(name_at, format!("duplicate layer `{name}`")));
        }
        let len = r.u32("element count")? as usize;
        let aux_at = r.pos;
        let codec = match scheme {
            Scheme::Uniform => {
                let w_min = f32::from_bits(r.f32_bits("w_min")?);
                let w_max = f32::from_bits(r.f32_bits("w_max")?);
                if !w_min.is_finite() || !w_max.is_finite() || w_min > w_max {
                    return Err(Error::corrupt(aux_at, "invalid uniform range"));
                }
                Codec::Uniform(UniformCodec { w_min, w_max, bits })
            }
            Scheme::Kmeans => {
                let mut centroids = Vec::new();
                let mut padding = false;
                for slot in 0..1usize << bits {
                    let raw = r.f32_bits("centroid")?;
                    if raw == PAD_BITS {
                        padding = true;
                    } else if padding {
                        return Err(Error::corrupt(aux_at + 4 * slot, "centroid after padding"));
                    } else {
                        centroids.push(f32::from_bits(raw));
                    }
                }
                let cb = KMeansCodebook::new(centroids, bits)
                    .map_err(|e| Error::corrupt(aux_at, e.to_string()))?;
                Codec::Kmeans(cb)
            }
        };
        let idx_at = r.pos;
        let raw = r.take(PackedIndices::byte_len(len, bits), "indices")?;
        let indices = PackedIndices::from_raw(raw.to_vec(), len, bits);
        if !indices.padding_is_clear() {
            return Err(Error::corrupt(r.pos - 1, "non-zero padding bits"));
        }
        let limit = codec.alphabet_len();
        if let Some(pos) = indices.iter().position(|i| i as usize >= limit) {
            return Err(Error::corrupt(
                idx_at + pos * bits as usize / 8,
                format!("index {} exceeds alphabet of {limit}", indices.get(pos)),
            ));
        }
        layers.push(QuantizedLayer {
            name,
            indices,
            codec,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(r.pos, "trailing bytes"));
    }
    Ok(QuantizedModel {
        scheme,
        bits,
        layers,
    })
}

/// Write a `.fsq` dump of one upload.
pub fn write_fsq(path: &Path, q: &QuantizedModel) -> Result<()> {
    let bytes = serialize_payload(q)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fsq(path: &Path) -> Result<QuantizedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_payload(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn indices(q: &QuantizedLayer) -> Vec<u32> {
        q.indices.to_vec()
    }

    fn ulp(x: f32) -> f64 {
        let x = x.abs();
        (f32::from_bits(x.to_bits() + 1) - x) as f64
    }

    #[test]
    fn uniform_examples() {
        let q = quant_uniform("l", &[-1.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(indices(&q), vec![0, 2, 3]);
        let Codec::Uniform(c) = q.codec else { panic!() };
        let back = dequant_uniform(&c, &q.indices);
        assert_eq!(back[0], -1.0);
        assert!((back[1] as f64 - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(back[2], 1.0);

        let q = quant_uniform("c", &[0.7, 0.7], 5).unwrap();
        assert_eq!(indices(&q), vec![0, 0]);
        assert_eq!(
            q.codec,
            Codec::Uniform(UniformCodec {
                w_min: 0.7,
                w_max: 0.7,
                bits: 5
            })
        );
        assert_eq!(dequant_layer(&q).unwrap(), vec![0.7, 0.7]);

        for bits in 1..=16 {
            let q = quant_uniform("e", &[-0.37, 2.5], bits).unwrap();
            assert_eq!(indices(&q), vec![0, (1 << bits) - 1]);
            assert_eq!(dequant_layer(&q).unwrap(), vec![-0.37, 2.5]);
        }
    }

    #[test]
    fn uniform_rejects_bad_input() {
        assert!(matches!(
            quant_uniform("x", &[f32::NAN], 4),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            quant_uniform("x", &[0.0], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            quant_uniform("x", &[0.0], 17),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_bound_exhaustive_small_vectors() {
        let grid: Vec<f32> = (-6..=6).map(|i| i as f32 * 0.125 + 0.01).collect();
        for bits in 1..=5u8 {
            for &a in &grid {
                for &b in &grid {
                    for &c in &grid {
                        let v = [a, b, c];
                        let q = quant_uniform("g", &v, bits).unwrap();
                        let Codec::Uniform(u) = q.codec else { panic!() };
                        let back = dequant_layer(&q).unwrap();
                        let bound = u.step() / 2.0 + 2.0 * ulp(u.w_min.abs().max(u.w_max.abs()));
                        for (x, y) in v.iter().zip(&back) {
                            assert!((*x as f64 - *y as f64).abs() <= bound);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn uniform_round_trip_bound(values in prop::collection::vec(-100.0f32..100.0, 1..64), bits in 1u8..=16) {
            let q = quant_uniform("p", &values, bits).unwrap();
            let Codec::Uniform(u) = q.codec.clone() else { unreachable!() };
            let back = dequant_layer(&q).unwrap();
            prop_assert_eq!(back.len(), values.len());
            let bound = u.step() / 2.0 + 2.0 * ulp(u.w_min.abs().max(u.w_max.abs()));
            for (x, y) in values.iter().zip(&back) {
                prop_assert!((*x as f64 - *y as f64).abs() <= bound);
            }
        }

        #[test]
        fn uniform_indices_monotone(mut values in prop::collection::vec(-5.0f32..5.0, 2..64), bits in 1u8..=16) {
            values.sort_by(f32::total_cmp);
            let q = quant_uniform("m", &values, bits).unwrap();
            let idx = q.indices.to_vec();
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn payload_round_trip(
            layers in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 0..40), 1..4),
            bits in 1u8..=8,
            kmeans in any::<bool>(),
        ) {
            let p = LayeredParams::new(
                layers.into_iter().enumerate()
                    .map(|(i, values)| Layer { name: format!("layer{i}"), values })
                    .collect(),
            ).unwrap();
            let scheme = if kmeans { Scheme::Kmeans } else { Scheme::Uniform };
            let q = quantize_model(&p, &QuantSpec::new(scheme, bits)).unwrap();
            let bytes = serialize_payload(&q).unwrap();
            let back = deserialize_payload(&bytes).unwrap();
            prop_assert_eq!(&back, &q);
            prop_assert_eq!(serialize_payload(&back).unwrap(), bytes);
        }

        #[test]
        fn packing_round_trip(values in prop::collection::vec(any::<u32>(), 0..100), bits in 1u8..=16) {
            let masked: Vec<u32> = values.iter().map(|v| v & ((1 << bits) - 1)).collect();
            let packed = PackedIndices::pack(&masked, bits);
            prop_assert_eq!(packed.as_bytes().len(), PackedIndices::byte_len(masked.len(), bits));
            prop_assert_eq!(packed.to_vec(), masked);
        }
    }

    #[test]
    fn kmeans_two_point_masses() {
        let cb = kmeans_fit(&[0.0, 0.0, 0.0, 10.0, 10.0, 10.0], 1, 50, 1e-9).unwrap();
        assert_eq!(cb.centroids, vec![0.0, 10.0]);
    }

    #[test]
    fn kmeans_exact_when_few_distinct_values() {
        let values = [0.5f32, -1.0, 0.5, 2.0, -1.0, 3.25];
        let cb = kmeans_fit(&values, 2, 50, 1e-9).unwrap();
        assert_eq!(cb.centroids, vec![-1.0, 0.5, 2.0, 3.25]);
        let q = quant_kmeans("k", &values, &cb).unwrap();
        assert_eq!(dequant_layer(&q).unwrap(), values.to_vec());
    }

    #[test]
    fn kmeans_rejects_empty() {
        assert!(matches!(kmeans_fit(&[], 2, 10, 0.0), Err(Error::Data(_))));
    }

    fn normal_sample(n: usize, std: f64, seed: u64) -> Vec<f32> {
        let mut rng = seed::rng(seed);
        let d = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| d.sample(&mut rng) as f32).collect()
    }

    fn mse(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn kmeans_beats_uniform_on_gaussian_weights() {
        let w = normal_sample(4096, 0.05, 42);
        let cb = kmeans_fit_default(&w, 4, &KMeansOptions::default()).unwrap();
        let km = dequant_layer(&quant_kmeans("w", &w, &cb).unwrap()).unwrap();
        let un = dequant_layer(&quant_uniform("w", &w, 4).unwrap()).unwrap();
        assert!(
            mse(&w, &km) < mse(&w, &un),
            "{} vs {}",
            mse(&w, &km),
            mse(&w, &un)
        );
    }

    #[test]
    fn kmeans_objective_never_increases() {
        for seed in 0..5 {
            let mut w = normal_sample(2000, 1.0, seed);
            // Heavy outliers provoke empty clusters.
            w.extend([40.0, -35.0, 60.0]);
            for bits in [2u8, 3, 5] {
                let (cb, trace) = kmeans_fit_traced(&w, bits, 50, 0.0).unwrap();
                assert!(trace.len() >= 2);
                for pair in trace.windows(2) {
                    assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{trace:?}");
                }
                assert!(cb.centroids.windows(2).all(|p| p[0] < p[1]));
                assert!(cb.centroids.len() <= 1 << bits);
            }
        }
    }

    #[test]
    fn nearest_centroid_tie_goes_low() {
        let cb = KMeansCodebook::new(vec![0.0, 10.0], 1).unwrap();
        assert_eq!(cb.nearest(5.0), 0);
        assert_eq!(cb.nearest(10.0), 1);
        assert_eq!(cb.nearest(0.0), 0);
        assert_eq!(cb.nearest(-3.0), 0);
        assert_eq!(cb.nearest(5.0001), 1);
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = seed::rng(9);
        for _ in 0..50 {
            let mut c: Vec<f32> = (0..rng.random_range(1..17))
                .map(|_| rng.random_range(-2.0f32..2.0))
                .collect();
            c.sort_by(f32::total_cmp);
            c.dedup();
            let cb = KMeansCodebook::new(c.clone(), 4).unwrap();
            for _ in 0..200 {
                let x: f32 = rng.random_range(-3.0..3.0);
                let mut best = 0;
                for j in 1..c.len() {
                    if ((x as f64) - c[j] as f64).abs() < ((x as f64) - c[best] as f64).abs() {
                        best = j;
                    }
                }
                assert_eq!(cb.nearest(x), best as u32, "x={x} c={c:?}");
            }
        }
    }

    #[test]
    fn dequant_kmeans_examples() {
        let cb = KMeansCodebook::new(vec![-2.0, 3.0], 1).unwrap();
        let idx = PackedIndices::pack(&[0, 0, 1], 1);
        assert_eq!(dequant_kmeans(&cb, &idx).unwrap(), vec![-2.0, -2.0, 3.0]);

        let cb = KMeansCodebook::new(vec![-1.5, 0.25, 0.5, 9.0], 3).unwrap();
        let q = quant_kmeans("c", &cb.centroids, &cb).unwrap();
        assert_eq!(dequant_layer(&q).unwrap(), cb.centroids);

        let bad = PackedIndices::pack(&[0, 5], 3);
        assert!(matches!(
            dequant_kmeans(&cb, &bad),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn kmeans_round_trip_within_half_max_gap() {
        let w = normal_sample(3000, 0.3, 5);
        for bits in [1u8, 2, 4, 6] {
            let cb = kmeans_fit_default(&w, bits, &KMeansOptions::default()).unwrap();
            let back = dequant_layer(&quant_kmeans("w", &w, &cb).unwrap()).unwrap();
            let (lo, hi) = (cb.centroids[0], *cb.centroids.last().unwrap());
            let gap = cb.max_gap();
            for (x, y) in w.iter().zip(&back) {
                let err = (*x as f64 - *y as f64).abs();
                // Points beyond the outer centroids are bounded by their distance to them.
                if *x >= lo && *x <= hi {
                    assert!(err <= gap / 2.0 + 1e-7, "{err} > {gap}/2");
                } else {
                    assert!(*y == lo || *y == hi);
                }
            }
        }
    }

    #[test]
    fn payload_size_examples() {
        let p = LayeredParams::new(vec![Layer {
            name: "w".into(),
            values: normal_sample(1000, 1.0, 1),
        }])
        .unwrap();
        let q = quantize_model(&p, &QuantSpec::new(Scheme::Uniform, 4)).unwrap();
        assert_eq!(payload_size(&q), (500, 8));

        let p = LayeredParams::new(
            (0..3)
                .map(|i| Layer {
                    name: format!("l{i}"),
                    values: normal_sample(700, 1.0, i),
                })
                .collect(),
        )
        .unwrap();
        for (scheme, bits) in [
            (Scheme::Kmeans, 8),
            (Scheme::Uniform, 3),
            (Scheme::Kmeans, 2),
        ] {
            let q = quantize_model(&p, &QuantSpec::new(scheme, bits)).unwrap();
            let (w, a) = payload_size(&q);
            if scheme == Scheme::Kmeans && bits == 8 {
                assert_eq!(a, 3 * 256 * 4);
            }
            let bytes = serialize_payload(&q).unwrap();
            assert_eq!(w + a, bytes.len() - framing_bytes(&q));
        }
    }

    #[test]
    fn deserialize_reports_offsets() {
        let p = LayeredParams::new(vec![Layer {
            name: "w".into(),
            values: normal_sample(37, 1.0, 3),
        }])
        .unwrap();
        let q = quantize_model(&p, &QuantSpec::new(Scheme::Kmeans, 3)).unwrap();
        let bytes = serialize_payload(&q).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            deserialize_payload(&bad),
            Err(Error::Corrupt { offset: 0, .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            deserialize_payload(&bad),
            Err(Error::Corrupt { offset: 4, .. })
        ));

        let cut = &bytes[..bytes.len() - 3];
        match deserialize_payload(cut) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset > HEADER_BYTES),
            other => panic!("{other:?}"),
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            deserialize_payload(&long),
            Err(Error::Corrupt { offset, .. }) if offset == bytes.len()
        ));
    }

    #[test]
    fn fsq_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("upload.fsq");
        let p = LayeredParams::new(vec![Layer {
            name: "fc0.weight".into(),
            values: normal_sample(64, 0.1, 8),
        }])
        .unwrap();
        let q = quantize_model(&p, &QuantSpec::new(Scheme::Uniform, 6)).unwrap();
        write_fsq(&path, &q).unwrap();
        assert_eq!(read_fsq(&path).unwrap(), q);
        assert!(matches!(
            read_fsq(&dir.path().join("missing.fsq")),
            Err(Error::Io { .. })
        ));
    }
}
