//! Corpus ingestion: manifests, alignments, context windows, edit scripts,
//! and the bundled lookup G2P.
//!
//! All loaders are pure functions of their inputs and the returned records
//! are plain owned data, so they are safe to call from multiple threads.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset split labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One line of the JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: String,
    pub text: String,
    pub audio: PathBuf,
    pub alignment: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Position of an utterance in corpus order (the order neighbors are
    /// drawn from).
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

/// Load a JSON-lines manifest. Blank lines are ignored; ids must be unique;
/// entry order is preserved.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate utterance id `{}` in {}",
                entry.id,
                path.display()
            )));
        }
        entries.push(entry);
    }
    Ok(DatasetManifest { entries })
}

/// Write a manifest in the same JSON-lines layout `load_manifest` reads.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Phoneme sequence with per-phoneme frame durations and word grouping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeTrack {
    pub phonemes: Vec<String>,
    pub durations_frames: Vec<usize>,
    /// `(start, end)` phoneme index ranges, contiguous and covering `[0, T)`.
    pub word_spans: Vec<(usize, usize)>,
}

impl PhonemeTrack {
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations_frames.iter().sum()
    }

    /// Word index that owns each phoneme.
    pub fn word_of_phoneme(&self, p: usize) -> usize {
        self.word_spans
            .iter()
            .position(|&(a, b)| p >= a && p < b)
            .expect("phoneme outside word spans")
    }

    pub fn validate(&self) -> Result<()> {
        if self.durations_frames.len() != self.phonemes.len() {
            return Err(Error::Validation(format!(
                "durations ({}) and phonemes ({}) disagree",
                self.durations_frames.len(),
                self.phonemes.len()
            )));
        }
        let mut cursor = 0usize;
        for &(a, b) in &self.word_spans {
            if a != cursor || b < a {
                return Err(Error::Validation(
                    "word spans must be contiguous and non-overlapping".into(),
                ));
            }
            cursor = b;
        }
        if cursor != self.phonemes.len() {
            return Err(Error::Validation(format!(
                "word spans cover {cursor} phonemes, track has {}",
                self.phonemes.len()
            )));
        }
        Ok(())
    }
}

/// Parse a TSV alignment (phoneme, start_sec, end_sec, word_index) and
/// convert times to frame durations at `fps` frames per second via
/// `round(end*fps) - round(start*fps)`.
pub fn load_alignment(path: &Path, fps: f64) -> Result<PhonemeTrack> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text, fps, path)
}

fn parse_alignment(text: &str, fps: f64, path: &Path) -> Result<PhonemeTrack> {
    let mut phonemes = Vec::new();
    let mut durations = Vec::new();
    let mut word_indices: Vec<i64> = Vec::new();
    let mut prev_end = 0.0_f64;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 4 tab-separated fields, got {}", parts.len()),
            ));
        }
        let phoneme = parts[0].trim().to_string();
        let start: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, "bad start time"))?;
        let end: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, "bad end time"))?;
        let word: i64 = parts[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, "bad word index"))?;
        if start < 0.0 || end < 0.0 {
            return Err(Error::Validation(format!(
                "{}:{}: negative time",
                path.display(),
                lineno + 1
            )));
        }
        if end < start {
            return Err(Error::Validation(format!(
                "{}:{}: interval ends before it starts",
                path.display(),
                lineno + 1
            )));
        }
        if start + 1e-9 < prev_end {
            return Err(Error::Validation(format!(
                "{}:{}: rows out of order or overlapping (start {start} < previous end {prev_end})",
                path.display(),
                lineno + 1
            )));
        }
        prev_end = end;
        let frames = (end * fps).round() - (start * fps).round();
        phonemes.push(phoneme);
        durations.push(frames.max(0.0) as usize);
        word_indices.push(word);
    }
    // word spans from runs of equal word indices
    let mut word_spans = Vec::new();
    let mut run_start = 0usize;
    for i in 1..word_indices.len() {
        if word_indices[i] != word_indices[i - 1] {
            word_spans.push((run_start, i));
            run_start = i;
        }
    }
    if !word_indices.is_empty() {
        word_spans.push((run_start, word_indices.len()));
    }
    let track = PhonemeTrack {
        phonemes,
        durations_frames: durations,
        word_spans,
    };
    track.validate()?;
    Ok(track)
}

/// Reconcile an alignment's total frames with a mel frame count. An
/// off-by-one is repaired on the final non-empty phoneme; anything larger
/// is fatal.
pub fn reconcile_frames(track: &mut PhonemeTrack, n_frames: usize) -> Result<()> {
    let total = track.total_frames();
    let diff = total as i64 - n_frames as i64;
    match diff {
        0 => Ok(()),
        1 => {
            let last = track
                .durations_frames
                .iter()
                .rposition(|&d| d > 0)
                .ok_or_else(|| Error::Validation("cannot clip an all-empty alignment".into()))?;
            track.durations_frames[last] -= 1;
            Ok(())
        }
        -1 => {
            if let Some(d) = track.durations_frames.last_mut() {
                *d += 1;
                Ok(())
            } else {
                Err(Error::Validation("cannot extend an empty alignment".into()))
            }
        }
        _ => Err(Error::Validation(format!(
            "alignment covers {total} frames but mel has {n_frames} (mismatch {diff} > 1 frame)"
        ))),
    }
}

/// One transcript with its cross-utterance window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub text: String,
    /// Up to `l` transcripts before, nearest last.
    pub neighbors_before: Vec<String>,
    /// Up to `l` transcripts after, nearest first.
    pub neighbors_after: Vec<String>,
}

/// Build the `2l+1` window around `index`, padding with empty-string
/// utterances at the corpus boundaries so both lists have length exactly
/// `l`. The context encoder maps the empty string to its constant vector.
pub fn build_context_window(corpus: &[ManifestEntry], index: usize, l: usize) -> Utterance {
    assert!(index < corpus.len(), "index out of range");
    let mut before = Vec::with_capacity(l);
    for k in (1..=l).rev() {
        before.push(match index.checked_sub(k) {
            Some(j) => corpus[j].text.clone(),
            None => String::new(),
        });
    }
    let mut after = Vec::with_capacity(l);
    for k in 1..=l {
        after.push(match corpus.get(index + k) {
            Some(e) => e.text.clone(),
            None => String::new(),
        });
    }
    let e = &corpus[index];
    Utterance {
        id: e.id.clone(),
        speaker_id: e.speaker.clone(),
        text: e.text.clone(),
        neighbors_before: before,
        neighbors_after: after,
    }
}

/// Supported edit operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Delete,
    Insert,
    Replace,
}

/// One line of a JSON-lines edit script
/// (`{id, op, word_start, word_end, text}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditScript {
    pub id: String,
    pub op: EditOp,
    pub word_start: usize,
    pub word_end: usize,
    #[serde(default)]
    pub text: String,
}

impl EditScript {
    pub fn validate(&self) -> Result<()> {
        if self.word_end < self.word_start {
            return Err(Error::Validation("word span ends before it starts".into()));
        }
        match self.op {
            EditOp::Delete if !self.text.is_empty() => Err(Error::Validation(
                "delete must have empty replacement text".into(),
            )),
            EditOp::Insert if self.word_end != self.word_start => Err(Error::Validation(
                "insert requires a zero-width word span".into(),
            )),
            _ => Ok(()),
        }
    }
}

pub fn load_edit_scripts(path: &Path) -> Result<Vec<EditScript>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scripts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: EditScript = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        s.validate()?;
        scripts.push(s);
    }
    Ok(scripts)
}

/// Words the bundled lexicon knows. Unknown words fall back to the
/// per-letter passthrough rule.
const BUILTIN_LEXICON: &str = "\
a\tAH
all\tAO L
and\tAE N D
asked\tAE S K T
be\tB IY
big\tB IH G
blue\tB L UW
cat\tK AE T
day\tD EY
dog\tD AO G
five\tF AY V
for\tF AO R
go\tG OW
good\tG UH D
green\tG R IY N
he\tHH IY
hello\tHH AH L OW
her\tHH ER
his\tHH IH Z
in\tIH N
is\tIH Z
it\tIH T
mary\tM EH R IY
me\tM IY
moon\tM UW N
new\tN UW
night\tN AY T
of\tAH V
old\tOW L D
on\tAA N
one\tW AH N
only\tOW N L IY
own\tOW N
property\tP R AA P ER T IY
red\tR EH D
run\tR AH N
said\tS EH D
she\tSH IY
sky\tS K AY
small\tS M AO L
star\tS T AA R
sun\tS AH N
that\tDH AE T
the\tDH AH
this\tDH IH S
time\tT AY M
to\tT UW
told\tT OW L D
two\tT UW
was\tW AA Z
we\tW IY
who\tHH UW
word\tW ER D
yes\tY EH S
you\tY UW
your\tY AO R
yours\tY AO R Z
";

/// Static word-to-phoneme lookup with an out-of-vocabulary passthrough:
/// unknown words are spelled out as one symbol per letter.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("builtin lexicon parses")
    }

    /// Load `word<TAB>phoneme phoneme ...` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, phones) = line
                .split_once('\t')
                .ok_or_else(|| Error::Validation(format!("bad lexicon line: {line}")))?;
            entries.insert(
                word.trim().to_lowercase(),
                phones.split_whitespace().map(str::to_string).collect(),
            );
        }
        Ok(Self { entries })
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    /// Grapheme-to-phoneme over whitespace-separated words. Punctuation is
    /// stripped; durations are zeroed (they come from alignment or the
    /// duration predictor).
    pub fn g2p(&self, text: &str) -> PhonemeTrack {
        let mut phonemes = Vec::new();
        let mut word_spans = Vec::new();
        for raw in text.split_whitespace() {
            let word: String = raw.chars().filter(|c| c.is_alphanumeric()).collect();
            if word.is_empty() {
                continue;
            }
            let start = phonemes.len();
            match self.lookup(&word) {
                Some(ps) => phonemes.extend(ps.iter().cloned()),
                None => {
                    // passthrough: one symbol per letter
                    phonemes.extend(
                        word.chars()
                            .filter(|c| c.is_alphabetic())
                            .map(|c| c.to_uppercase().to_string()),
                    );
                    if phonemes.len() == start {
                        // all-digit word: keep it as a single opaque symbol
                        phonemes.push(word.to_uppercase());
                    }
                }
            }
            word_spans.push((start, phonemes.len()));
        }
        let durations = vec![0; phonemes.len()];
        PhonemeTrack {
            phonemes,
            durations_frames: durations,
            word_spans,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn manifest_line(id: &str, split: &str) -> String {
        format!(
            "{{\"id\":\"{id}\",\"speaker\":\"s1\",\"text\":\"hello\",\"audio\":\"{id}.wav\",\"alignment\":\"{id}.tsv\",\"split\":\"{split}\"}}"
        )
    }

    fn write_temp(content: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_manifest_loads_as_zero_entries() {
        let f = write_temp("");
        let m = load_manifest(f.path()).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn manifest_preserves_order_and_round_trips() {
        let lines = [
            manifest_line("u1", "train"),
            manifest_line("u2", "val"),
            manifest_line("u3", "test"),
        ]
        .join("\n");
        let f = write_temp(&lines);
        let m = load_manifest(f.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[0].id, "u1");
        assert_eq!(m.entries[2].split, Split::Test);

        let out = NamedTempFile::new().unwrap();
        save_manifest(&m, out.path()).unwrap();
        let m2 = load_manifest(out.path()).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn bad_split_error_names_allowed_values() {
        let f = write_temp(&manifest_line("u1", "dev"));
        let err = load_manifest(f.path()).unwrap_err().to_string();
        assert!(err.contains("train") && err.contains("val") && err.contains("test"), "{err}");
        assert!(err.contains(":1:"), "error should carry the line number: {err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let lines = [manifest_line("u1", "train"), manifest_line("u1", "train")].join("\n");
        let f = write_temp(&lines);
        let err = load_manifest(f.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn alignment_hand_conversion_at_fps_100() {
        let f = write_temp("p1\t0.0\t0.1\t0\np2\t0.1\t0.2\t0\n");
        let t = load_alignment(f.path(), 100.0).unwrap();
        assert_eq!(t.durations_frames, vec![10, 10]);
        assert_eq!(t.word_spans, vec![(0, 2)]);
    }

    #[test]
    fn zero_length_interval_kept_with_duration_zero() {
        let f = write_temp("p1\t0.0\t0.1\t0\np2\t0.1\t0.1\t0\np3\t0.1\t0.2\t1\n");
        let t = load_alignment(f.path(), 100.0).unwrap();
        assert_eq!(t.durations_frames, vec![10, 0, 10]);
        assert_eq!(t.word_spans, vec![(0, 2), (2, 3)]);
    }

    #[test]
    fn out_of_order_rows_rejected() {
        let f = write_temp("p1\t0.1\t0.2\t0\np2\t0.0\t0.1\t0\n");
        assert!(load_alignment(f.path(), 100.0).is_err());
    }

    #[test]
    fn negative_time_rejected() {
        let f = write_temp("p1\t-0.1\t0.2\t0\n");
        assert!(load_alignment(f.path(), 100.0).is_err());
    }

    fn entries(texts: &[&str]) -> Vec<ManifestEntry> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| ManifestEntry {
                id: format!("u{i}"),
                speaker: "s".into(),
                text: t.to_string(),
                audio: "a.wav".into(),
                alignment: "a.tsv".into(),
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn interior_window() {
        let c = entries(&["A", "B", "C"]);
        let u = build_context_window(&c, 1, 1);
        assert_eq!(u.neighbors_before, vec!["A"]);
        assert_eq!(u.neighbors_after, vec!["C"]);
    }

    #[test]
    fn boundary_window_pads_with_empty() {
        let c = entries(&["A", "B", "C"]);
        let u = build_context_window(&c, 0, 2);
        assert_eq!(u.neighbors_before, vec!["", ""]);
        assert_eq!(u.neighbors_after, vec!["B", "C"]);
    }

    #[test]
    fn degenerate_window() {
        let c = entries(&["A", "B"]);
        let u = build_context_window(&c, 0, 0);
        assert!(u.neighbors_before.is_empty());
        assert!(u.neighbors_after.is_empty());
    }

    #[test]
    fn window_lists_always_have_length_l() {
        let c = entries(&["A", "B", "C", "D", "E"]);
        for l in 0..4 {
            for i in 0..c.len() {
                let u = build_context_window(&c, i, l);
                assert_eq!(u.neighbors_before.len(), l);
                assert_eq!(u.neighbors_after.len(), l);
            }
        }
    }

    #[test]
    fn reconcile_repairs_off_by_one_and_rejects_larger() {
        let mut t = PhonemeTrack {
            phonemes: vec!["a".into(), "b".into()],
            durations_frames: vec![5, 5],
            word_spans: vec![(0, 2)],
        };
        reconcile_frames(&mut t, 9).unwrap();
        assert_eq!(t.durations_frames, vec![5, 4]);
        reconcile_frames(&mut t, 10).unwrap();
        assert_eq!(t.durations_frames, vec![5, 5]);
        assert!(reconcile_frames(&mut t, 13).is_err());
    }

    #[test]
    fn edit_script_invariants() {
        let del = EditScript {
            id: "u".into(),
            op: EditOp::Delete,
            word_start: 1,
            word_end: 2,
            text: "x".into(),
        };
        assert!(del.validate().is_err());
        let ins = EditScript {
            id: "u".into(),
            op: EditOp::Insert,
            word_start: 1,
            word_end: 2,
            text: "x".into(),
        };
        assert!(ins.validate().is_err());
    }

    #[test]
    fn g2p_uses_lexicon_and_passthrough() {
        let lex = Lexicon::builtin();
        let t = lex.g2p("Mary asked the zorp!");
        assert_eq!(t.word_spans.len(), 4);
        let (s, e) = t.word_spans[3];
        assert_eq!(&t.phonemes[s..e], &["Z", "O", "R", "P"]);
        assert_eq!(t.durations_frames.iter().sum::<usize>(), 0);
        t.validate().unwrap();
    }
}
