//! Soft pseudo-label ingestion and Top-n event vocabulary selection.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the tagger's event space.
pub const N_EVENT_CLASSES: usize = 527;
pub const LABEL_MAGIC: &[u8; 8] = b"ERGLPLBL";
pub const LABEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelVector {
    pub clip_id: String,
    pub y: Vec<f32>,
}

impl PseudoLabelVector {
    pub fn new(clip_id: impl Into<String>, y: Vec<f32>) -> Result<Self> {
        let clip_id = clip_id.into();
        if y.len() != N_EVENT_CLASSES {
            return Err(Error::Format(format!("{clip_id}: expected {N_EVENT_CLASSES} values, got {}", y.len())));
        }
        if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("{clip_id}: component {i} = {v} is outside [0, 1]")));
        }
        Ok(PseudoLabelVector { clip_id, y })
    }

    pub fn zeros(clip_id: impl Into<String>) -> Self {
        PseudoLabelVector { clip_id: clip_id.into(), y: vec![0.0; N_EVENT_CLASSES] }
    }
}

/// Exact sum of `f32` values in `[0, 1]` as a 192-bit fixed-point integer
/// in units of the smallest subnormal, so the total is independent of the
/// order values arrive in and of how partial sums are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExactSum([u64; 3]);

impl ExactSum {
    pub fn add(&mut self, x: f32) {
        debug_assert!((0.0..=1.0).contains(&x));
        let bits = x.to_bits();
        let exp = (bits >> 23) & 0xff;
        let frac = (bits & 0x7f_ffff) as u128;
        let (mant, shift) = if exp == 0 { (frac, 0) } else { (frac | 0x80_0000, exp - 1) };
        // labels never exceed 1, so the shifted mantissa stays below 2^150
        let (limb, off) = ((shift / 64) as usize, shift % 64);
        let wide = mant << off;
        let mut parts = [0u64; 4];
        parts[limb] = wide as u64;
        parts[limb + 1] = (wide >> 64) as u64;
        self.merge(&ExactSum([parts[0], parts[1], parts[2]]));
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let mut carry = false;
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            let (s1, c1) = a.overflowing_add(b);
            let (s2, c2) = s1.overflowing_add(carry as u64);
            *a = s2;
            carry = c1 || c2;
        }
    }

    pub fn to_f64(&self) -> f64 {
        let [l0, l1, l2] = self.0;
        let scale = |l: u64, k: i32| l as f64 * 2f64.powi(64 * k - 149);
        scale(l2, 2) + scale(l1, 1) + scale(l0, 0)
    }
}

/// Componentwise sum of the label vectors.
pub fn accumulate<'a>(labels: impl IntoIterator<Item = &'a PseudoLabelVector>) -> Result<Vec<f64>> {
    let mut acc = vec![ExactSum::default(); N_EVENT_CLASSES];
    let mut count = 0usize;
    for label in labels {
        if label.y.len() != N_EVENT_CLASSES {
            return Err(Error::Format(format!("{}: expected {N_EVENT_CLASSES} values, got {}", label.clip_id, label.y.len())));
        }
        for (a, &v) in acc.iter_mut().zip(&label.y) {
            a.add(v);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("cannot rank events without pseudo labels".into()));
    }
    Ok(acc.iter().map(ExactSum::to_f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventVocabulary {
    /// Indices into the 527-event space, by descending score.
    pub event_ids: Vec<usize>,
    pub names: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub index: usize,
    pub name: String,
    pub score: f64,
}

impl EventVocabulary {
    pub fn n(&self) -> usize {
        self.event_ids.len()
    }

    /// Replaces the generic names of events listed in `names` (indexed by
    /// the 527-space id).
    pub fn with_names(mut self, names: &[(usize, String)]) -> Self {
        for (id, name) in names {
            if let Some(k) = self.event_ids.iter().position(|e| e == id) {
                self.names[k] = name.clone();
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.event_ids.len();
        if n == 0 || self.names.len() != n || self.scores.len() != n {
            return Err(Error::Format("vocabulary ids, names and scores disagree in length".into()));
        }
        let mut seen = vec![false; N_EVENT_CLASSES];
        for &id in &self.event_ids {
            if id >= N_EVENT_CLASSES || std::mem::replace(&mut seen[id], true) {
                return Err(Error::Format(format!("vocabulary index {id} is out of range or repeated")));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<VocabEntry> {
        (0..self.n())
            .map(|k| VocabEntry { index: self.event_ids[k], name: self.names[k].clone(), score: self.scores[k] })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<VocabEntry> = serde_json::from_str(text).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        let vocab = EventVocabulary {
            event_ids: entries.iter().map(|e| e.index).collect(),
            names: entries.iter().map(|e| e.name.clone()).collect(),
            scores: entries.iter().map(|e| e.score).collect(),
        };
        vocab.validate()?;
        Ok(vocab)
    }
}

/// The `n` highest-scoring events; ties go to the lower index.
pub fn select_top_n(scores: &[f64], n: usize) -> Result<EventVocabulary> {
    if n == 0 || n > scores.len() {
        return Err(Error::Config(format!("vocabulary size must be in 1..={}, got {n}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(EventVocabulary {
        names: order.iter().map(|i| format!("event_{i}")).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        event_ids: order,
    })
}

/// Gathers the vocabulary components of `y`, in vocabulary order.
pub fn project_labels(y: &PseudoLabelVector, vocab: &EventVocabulary) -> Vec<f32> {
    vocab.event_ids.iter().map(|&i| y.y[i]).collect()
}

/// Reads either label format, chosen by the leading magic bytes.
pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelVector>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(LABEL_MAGIC) {
        decode_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: not UTF-8 text", path.display())))?;
        parse_csv(&text)
    }
}

/// `clip_id,i:p,i:p,...` per line; absent indices are zero.
pub fn parse_csv(text: &str) -> Result<Vec<PseudoLabelVector>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("pseudo labels: {e}")))?;
        let line = record.position().map_or(k as u64 + 1, |p| p.line());
        let clip_id = record.get(0).unwrap_or("").trim();
        if clip_id.is_empty() {
            return Err(Error::Format(format!("pseudo labels line {line}: missing clip id")));
        }
        let mut label = PseudoLabelVector::zeros(clip_id);
        for field in record.iter().skip(1).map(str::trim).filter(|f| !f.is_empty()) {
            let bad = || Error::Format(format!("pseudo labels line {line}: bad pair {field:?}"));
            let (i, p) = field.split_once(':').ok_or_else(bad)?;
            let i: usize = i.trim().parse().map_err(|_| bad())?;
            let p: f32 = p.trim().parse().map_err(|_| bad())?;
            if i >= N_EVENT_CLASSES || !(0.0..=1.0).contains(&p) {
                return Err(bad());
            }
            label.y[i] = p;
        }
        out.push(label);
    }
    Ok(out)
}

/// Sparse CSV with every nonzero component, printed with round-trip precision.
pub fn format_csv(labels: &[PseudoLabelVector]) -> String {
    let mut out = String::new();
    for label in labels {
        out.push_str(&label.clip_id);
        for (i, &p) in label.y.iter().enumerate().filter(|(_, &p)| p != 0.0) {
            out.push_str(&format!(",{i}:{p}"));
        }
        out.push('\n');
    }
    out
}

pub fn encode_binary(labels: &[PseudoLabelVector]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(14 + labels.len() * (2 + 4 * N_EVENT_CLASSES));
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&LABEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for label in labels {
        let id = label.clip_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Format(format!("clip id too long: {}", label.clip_id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        for v in &label.y {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<Vec<PseudoLabelVector>> {
    let mut r = bytes;
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf).map_err(|_| Error::Format(format!("pseudo labels truncated in {what}")))?;
        Ok(buf)
    };
    if take(8, "magic")? != LABEL_MAGIC {
        return Err(Error::Format("pseudo labels: bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != LABEL_VERSION {
        return Err(Error::Format(format!("pseudo labels: unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2, "clip id length")?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(len, "clip id")?).map_err(|_| Error::Format("pseudo labels: clip id is not UTF-8".into()))?;
        let y = take(4 * N_EVENT_CLASSES, "label values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(PseudoLabelVector::new(id, y)?);
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("pseudo labels: {} trailing bytes", r.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(id: &str, pairs: &[(usize, f32)]) -> PseudoLabelVector {
        let mut l = PseudoLabelVector::zeros(id);
        for &(i, p) in pairs {
            l.y[i] = p;
        }
        l
    }

    #[test]
    fn single_clip_scores_are_its_label() {
        let l = label("a", &[(0, 0.3), (526, 1.0), (17, 1e-30)]);
        let s = accumulate([&l]).unwrap();
        for (a, b) in s.iter().zip(&l.y) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn two_clips_add() {
        let (a, b) = (label("a", &[(0, 0.5)]), label("b", &[(0, 0.25)]));
        assert_eq!(accumulate([&a, &b]).unwrap()[0], 0.75);
    }

    #[test]
    fn empty_and_short_inputs_fail() {
        assert!(matches!(accumulate(std::iter::empty()), Err(Error::Contract(_))));
        let short = PseudoLabelVector { clip_id: "x".into(), y: vec![0.0; 3] };
        assert!(matches!(accumulate([&short]), Err(Error::Format(_))));
        assert!(PseudoLabelVector::new("x", vec![0.0; 3]).is_err());
        assert!(PseudoLabelVector::new("x", vec![1.5; N_EVENT_CLASSES]).is_err());
    }

    #[test]
    fn exact_sum_spans_limbs() {
        let mut s = ExactSum::default();
        for x in [1.0f32, f32::from_bits(1), 0.5, 1e-20] {
            s.add(x);
        }
        let mut t = ExactSum::default();
        for x in [1e-20f32, 0.5, f32::from_bits(1), 1.0] {
            t.add(x);
        }
        assert_eq!(s, t);
        assert_eq!(s.to_f64(), 1.5 + 1e-20f32 as f64);
        let mut big = ExactSum::default();
        for _ in 0..1000 {
            big.add(1.0);
        }
        assert_eq!(big.to_f64(), 1000.0);
    }

    #[test]
    fn top_n_on_identity_scores() {
        let scores: Vec<f64> = (0..N_EVENT_CLASSES).map(|i| i as f64).collect();
        assert_eq!(select_top_n(&scores, 3).unwrap().event_ids, vec![526, 525, 524]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let mut scores = vec![0.0; N_EVENT_CLASSES];
        scores[9] = 2.0;
        scores[4] = 2.0;
        scores[300] = 1.0;
        scores[2] = 1.0;
        assert_eq!(select_top_n(&scores, 4).unwrap().event_ids, vec![4, 9, 2, 300]);
    }

    #[test]
    fn n_out_of_range() {
        let scores = vec![0.0; N_EVENT_CLASSES];
        assert!(matches!(select_top_n(&scores, 0), Err(Error::Config(_))));
        assert!(matches!(select_top_n(&scores, 528), Err(Error::Config(_))));
        assert_eq!(select_top_n(&scores, 25).unwrap().n(), 25);
    }

    #[test]
    fn project_is_a_gather() {
        let y = label("a", &[(0, 0.1), (1, 0.2), (2, 0.3)]);
        let mut vocab = select_top_n(&[3.0, 2.0, 1.0], 3).unwrap();
        assert_eq!(project_labels(&y, &vocab), vec![0.1, 0.2, 0.3]);
        vocab.event_ids = vec![2, 0, 1];
        assert_eq!(project_labels(&y, &vocab), vec![0.3, 0.1, 0.2]);
    }

    #[test]
    fn csv_parses_sparse_pairs() {
        let text = "clip_a,0:0.5,10:1\nclip_b\n\"odd,id\",526:0.25\n";
        let labels = parse_csv(text).unwrap();
        assert_eq!(labels.len(), 3);
        assert_eq!(labels[0].y[10], 1.0);
        assert_eq!(labels[1].y.iter().sum::<f32>(), 0.0);
        assert_eq!(labels[2].clip_id, "odd,id");
        assert_eq!(labels[2].y[526], 0.25);
    }

    #[test]
    fn csv_errors_name_the_line() {
        for bad in ["a,0:0.5\nb,600:0.1\n", "a,0:0.5\nb,3=0.1\n", "a,0:0.5\nb,3:1.5\n"] {
            let msg = parse_csv(bad).unwrap_err().to_string();
            assert!(msg.contains("line 2"), "{msg}");
        }
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let mut scores = vec![0.0; N_EVENT_CLASSES];
        scores[7] = 3.5;
        scores[70] = 1.25;
        let v = select_top_n(&scores, 2).unwrap().with_names(&[(70, "siren".into())]);
        let back = EventVocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.names, vec!["event_7", "siren"]);
    }

    fn arb_label() -> impl Strategy<Value = PseudoLabelVector> {
        (any::<u32>(), proptest::collection::vec((0usize..N_EVENT_CLASSES, 0.0f32..=1.0), 0..20))
            .prop_map(|(id, pairs)| label(&format!("c{id}"), &pairs))
    }

    proptest! {
        #[test]
        fn accumulation_ignores_order(labels in proptest::collection::vec(arb_label(), 1..30), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = accumulate(&labels).unwrap();
            let b = accumulate(&shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            let va = select_top_n(&a, 10).unwrap();
            let vb = select_top_n(&b, 10).unwrap();
            prop_assert_eq!(&va.event_ids, &vb.event_ids);
            let chosen: std::collections::HashSet<_> = va.event_ids.iter().copied().collect();
            let min_in = va.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max_out = (0..N_EVENT_CLASSES).filter(|i| !chosen.contains(i)).map(|i| a[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_in >= max_out);
        }

        #[test]
        fn binary_and_csv_round_trip(labels in proptest::collection::vec(arb_label(), 0..8)) {
            let bytes = encode_binary(&labels).unwrap();
            prop_assert_eq!(&decode_binary(&bytes).unwrap(), &labels);
            prop_assert_eq!(&parse_csv(&format_csv(&labels)).unwrap(), &labels);
        }
    }

    #[test]
    fn binary_truncation_and_magic() {
        let bytes = encode_binary(&[label("a", &[(3, 0.5)])]).unwrap();
        for cut in [0, 5, 13, 20, bytes.len() - 1] {
            assert!(decode_binary(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_binary(&bad).is_err());
    }

    #[test]
    fn format_sniffing() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![label("a", &[(3, 0.5)])];
        let bin = dir.path().join("l.bin");
        fs::write(&bin, encode_binary(&labels).unwrap()).unwrap();
        let csv = dir.path().join("l.csv");
        fs::write(&csv, format_csv(&labels)).unwrap();
        assert_eq!(read_pseudo_labels(&bin).unwrap(), labels);
        assert_eq!(read_pseudo_labels(&csv).unwrap(), labels);
    }
}
