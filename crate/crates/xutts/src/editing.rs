//! Text-based speech editing: edit plans and flag algebra, prior patching
//! with boundary smoothing, duration adjustment, masked-training plans,
//! and the biased loss weighting.
//!
//! An edit rewrites a word span: the original phonemes split as
//! `[a, b, c]`, the edited sequence as `[a, b', c]`, with deletion and
//! addition flags marking `b` and `b'` respectively. Replacement is
//! exactly a deletion composed with an insertion.

use tapegrad::nn::Conv1d;
use tapegrad::{Matrix, Tape, Var};

use crate::corpus::{EditOp, EditScript, PhonemeTrack};
use crate::error::{Error, Result};
use crate::vae::LATENT_DIM;

/// A fully resolved edit: tracks on both sides plus flag vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditPlan {
    /// The track the original audio was aligned with.
    pub original: PhonemeTrack,
    /// The edited phoneme sequence `[a, b', c]`. Unedited positions keep
    /// their original durations; inserted phonemes carry duration 0 until
    /// the duration adjustor fills them in.
    pub edited: PhonemeTrack,
    /// Over original phonemes: true where `b` is removed.
    pub flag_del: Vec<bool>,
    /// Over edited phonemes: true where `b'` is generated.
    pub flag_add: Vec<bool>,
    /// `flag_add` expanded by the edited track's durations.
    pub frame_mask: Vec<bool>,
}

fn single_run(flags: &[bool]) -> Result<(usize, usize)> {
    let first = flags.iter().position(|f| *f);
    match first {
        None => Ok((0, 0)),
        Some(a) => {
            let b = flags.iter().rposition(|f| *f).unwrap() + 1;
            if flags[a..b].iter().all(|f| *f) {
                Ok((a, b))
            } else {
                Err(Error::Validation(
                    "edit flags must form a single contiguous run".into(),
                ))
            }
        }
    }
}

/// Expand a phoneme-level flag vector onto the frame axis.
pub fn expand_frame_mask(flags: &[bool], durations: &[usize]) -> Vec<bool> {
    debug_assert_eq!(flags.len(), durations.len());
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (f, &d) in flags.iter().zip(durations) {
        for _ in 0..d {
            out.push(*f);
        }
    }
    out
}

impl EditPlan {
    /// A no-op edit: nothing deleted, nothing added.
    pub fn identity(track: &PhonemeTrack) -> Self {
        EditPlan {
            original: track.clone(),
            edited: track.clone(),
            flag_del: vec![false; track.len()],
            flag_add: vec![false; track.len()],
            frame_mask: vec![false; track.total_frames()],
        }
    }

    /// Phoneme index range of the added run in the edited track.
    pub fn added_run(&self) -> (usize, usize) {
        single_run(&self.flag_add).expect("validated plan")
    }

    pub fn validate(&self) -> Result<()> {
        self.original.validate()?;
        self.edited.validate()?;
        if self.flag_del.len() != self.original.len() {
            return Err(Error::Validation("flag_del length mismatch".into()));
        }
        if self.flag_add.len() != self.edited.len() {
            return Err(Error::Validation("flag_add length mismatch".into()));
        }
        single_run(&self.flag_del)?;
        single_run(&self.flag_add)?;
        if self.frame_mask != expand_frame_mask(&self.flag_add, &self.edited.durations_frames) {
            return Err(Error::Validation(
                "frame mask inconsistent with flag_add and durations".into(),
            ));
        }
        Ok(())
    }

    /// Rebuild the frame mask for externally adjusted durations.
    pub fn frame_mask_with(&self, durations: &[usize]) -> Vec<bool> {
        expand_frame_mask(&self.flag_add, durations)
    }
}

/// Phoneme range `[start, end)` covered by words `[ws, we)`; a zero-width
/// word span maps to the zero-width phoneme position at its boundary.
fn word_phoneme_range(track: &PhonemeTrack, ws: usize, we: usize) -> Result<(usize, usize)> {
    let n_words = track.word_spans.len();
    if ws > we || we > n_words {
        return Err(Error::Validation(format!(
            "word span {ws}..{we} out of range for {n_words} words"
        )));
    }
    if ws == we {
        let p = if ws < n_words {
            track.word_spans[ws].0
        } else {
            track.len()
        };
        return Ok((p, p));
    }
    Ok((track.word_spans[ws].0, track.word_spans[we - 1].1))
}

/// Build an edit plan from a script and the G2P of its replacement text.
/// Inserted phonemes carry duration 0; unedited positions keep the
/// original durations.
pub fn build_edit_plan(original: &PhonemeTrack, script: &EditScript,
                       replacement: &PhonemeTrack) -> Result<EditPlan> {
    original.validate()?;
    replacement.validate()?;
    script.validate()?;
    if script.op == EditOp::Delete && !replacement.is_empty() {
        return Err(Error::Validation(
            "delete takes no replacement phonemes".into(),
        ));
    }
    let (p_start, p_end) = word_phoneme_range(original, script.word_start, script.word_end)?;

    let mut phonemes = Vec::with_capacity(original.len());
    let mut durations = Vec::with_capacity(original.len());
    phonemes.extend_from_slice(&original.phonemes[..p_start]);
    durations.extend_from_slice(&original.durations_frames[..p_start]);
    phonemes.extend_from_slice(&replacement.phonemes);
    durations.extend(std::iter::repeat(0).take(replacement.len()));
    phonemes.extend_from_slice(&original.phonemes[p_end..]);
    durations.extend_from_slice(&original.durations_frames[p_end..]);

    let mut word_spans = Vec::new();
    word_spans.extend_from_slice(&original.word_spans[..script.word_start]);
    for &(a, b) in &replacement.word_spans {
        word_spans.push((a + p_start, b + p_start));
    }
    let shift = p_start + replacement.len();
    for &(a, b) in &original.word_spans[script.word_end..] {
        word_spans.push((a - p_end + shift, b - p_end + shift));
    }

    let edited = PhonemeTrack {
        phonemes,
        durations_frames: durations,
        word_spans,
    };
    let mut flag_del = vec![false; original.len()];
    flag_del[p_start..p_end].iter_mut().for_each(|f| *f = true);
    let mut flag_add = vec![false; edited.len()];
    flag_add[p_start..p_start + replacement.len()]
        .iter_mut()
        .for_each(|f| *f = true);
    let frame_mask = expand_frame_mask(&flag_add, &edited.durations_frames);
    let plan = EditPlan {
        original: original.clone(),
        edited,
        flag_del,
        flag_add,
        frame_mask,
    };
    plan.validate()?;
    Ok(plan)
}

/// Sequence a deletion plan with an insertion plan over its output. The
/// composition carries the deletion flags of the first plan and the
/// addition flags of the second; a replacement script must produce exactly
/// this plan.
pub fn compose_plans(del: &EditPlan, ins: &EditPlan) -> Result<EditPlan> {
    if ins.original != del.edited {
        return Err(Error::Validation(
            "insertion plan does not start from the deletion output".into(),
        ));
    }
    if del.flag_add.iter().any(|f| *f) {
        return Err(Error::Validation("first plan must be a pure deletion".into()));
    }
    if ins.flag_del.iter().any(|f| *f) {
        return Err(Error::Validation("second plan must be a pure insertion".into()));
    }
    let plan = EditPlan {
        original: del.original.clone(),
        edited: ins.edited.clone(),
        flag_del: del.flag_del.clone(),
        flag_add: ins.flag_add.clone(),
        frame_mask: ins.frame_mask.clone(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Patched prior statistics as tape nodes.
pub struct PatchedVars {
    pub mu_hat: Var,
    pub log_sigma_hat: Var,
    pub mu_prime: Var,
    pub log_sigma_prime: Var,
}

/// Splice zeros into the edited positions of the posterior statistics
/// (`mu_hat = [mu_a, 0, mu_c]`, `log sigma_hat = [ls_a, 0, ls_c]`, i.e.
/// `sigma_hat = 1` in the edited run) and smooth both through the learned
/// boundary convolution. `mu_unedited`/`log_sigma_unedited` hold one row
/// per unedited phoneme, in order.
pub fn patch_and_smooth(t: &mut Tape, mu_unedited: Var, log_sigma_unedited: Var,
                        plan: &EditPlan, smooth: &Conv1d) -> Result<PatchedVars> {
    plan.validate()?;
    let (b_start, b_end) = plan.added_run();
    let n_unedited = plan.flag_add.iter().filter(|f| !**f).count();
    if t.value(mu_unedited).nrows() != n_unedited {
        return Err(Error::Shape(format!(
            "{} unedited posterior rows for {} unedited phonemes",
            t.value(mu_unedited).nrows(),
            n_unedited
        )));
    }
    let splice = |t: &mut Tape, stats: Var| -> Var {
        let mut parts = Vec::new();
        if b_start > 0 {
            parts.push(t.slice_rows(stats, 0, b_start));
        }
        if b_end > b_start {
            parts.push(t.constant(Matrix::zeros((b_end - b_start, LATENT_DIM))));
        }
        if b_start < n_unedited {
            parts.push(t.slice_rows(stats, b_start, n_unedited));
        }
        t.concat_rows(&parts)
    };
    let mu_hat = splice(t, mu_unedited);
    let log_sigma_hat = splice(t, log_sigma_unedited);
    let cat = t.concat_cols(mu_hat, log_sigma_hat);
    let smoothed = smooth.forward(t, cat);
    let mu_prime = t.slice_cols(smoothed, 0, LATENT_DIM);
    let log_sigma_prime = t.slice_cols(smoothed, LATENT_DIM, 2 * LATENT_DIM);
    Ok(PatchedVars {
        mu_hat,
        log_sigma_hat,
        mu_prime,
        log_sigma_prime,
    })
}

/// Plain-data view of the patched prior.
#[derive(Debug, Clone)]
pub struct PatchedPrior {
    pub mu_hat: Matrix,
    pub sigma_hat: Matrix,
    pub mu_prime: Matrix,
    pub sigma_prime: Matrix,
}

/// Plain-data patching for callers outside a training tape.
pub fn patch_prior(mu_unedited: &Matrix, sigma_unedited: &Matrix, plan: &EditPlan,
                   smooth: &Conv1d) -> Result<PatchedPrior> {
    if sigma_unedited.iter().any(|&s| s <= 0.0) {
        return Err(Error::Validation("sigma values must be positive".into()));
    }
    let mut t = Tape::new();
    let mu = t.constant(mu_unedited.clone());
    let ls = t.constant(sigma_unedited.mapv(f64::ln));
    let p = patch_and_smooth(&mut t, mu, ls, plan, smooth)?;
    Ok(PatchedPrior {
        mu_hat: t.value(p.mu_hat).clone(),
        sigma_hat: t.value(p.log_sigma_hat).mapv(f64::exp),
        mu_prime: t.value(p.mu_prime).clone(),
        sigma_prime: t.value(p.log_sigma_prime).mapv(f64::exp),
    })
}

/// Scale predicted durations in the edited region by the ratio of original
/// to predicted duration over the unedited area, rounding half away from
/// zero. Unedited positions keep their original durations.
pub fn adjust_durations(predicted_frames: &[f64], plan: &EditPlan) -> Result<Vec<usize>> {
    if predicted_frames.len() != plan.edited.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} edited phonemes",
            predicted_frames.len(),
            plan.edited.len()
        )));
    }
    if !plan.flag_add.iter().any(|f| *f) {
        return Ok(plan.edited.durations_frames.clone());
    }
    let mut orig_unedited = 0.0;
    let mut pred_unedited = 0.0;
    for (i, added) in plan.flag_add.iter().enumerate() {
        if !added {
            orig_unedited += plan.edited.durations_frames[i] as f64;
            pred_unedited += predicted_frames[i];
        }
    }
    if pred_unedited <= 0.0 {
        return Err(Error::Validation(
            "predicted durations over the unedited area sum to zero".into(),
        ));
    }
    let ratio = orig_unedited / pred_unedited;
    Ok(plan
        .flag_add
        .iter()
        .enumerate()
        .map(|(i, added)| {
            if *added {
                (predicted_frames[i] * ratio).round().max(0.0) as usize
            } else {
                plan.edited.durations_frames[i]
            }
        })
        .collect())
}

/// Deterministic masked-training plan: the contiguous run of whole words
/// whose frame coverage is closest to `rate * total_frames` is treated as
/// the edited region, with the reconstruction convention `b' = b`. Ties go
/// to the earliest start, then the shortest run. The seed is threaded from
/// the mask RNG for signature stability; the current selection rule is
/// deterministic and does not consume it.
pub fn sample_training_mask(track: &PhonemeTrack, rate: f64, _seed: u64) -> Result<EditPlan> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Validation("mask rate must be in (0, 1)".into()));
    }
    track.validate()?;
    let n_words = track.word_spans.len();
    if n_words == 0 {
        return Err(Error::Validation("cannot mask an empty track".into()));
    }
    let word_frames: Vec<f64> = track
        .word_spans
        .iter()
        .map(|&(a, b)| track.durations_frames[a..b].iter().sum::<usize>() as f64)
        .collect();
    let target = rate * track.total_frames() as f64;
    let mut best = (f64::INFINITY, 0usize, 1usize);
    for i in 0..n_words {
        let mut cov = 0.0;
        for j in i + 1..=n_words {
            cov += word_frames[j - 1];
            let diff = (cov - target).abs();
            if diff < best.0 {
                best = (diff, i, j);
            }
        }
    }
    let (_, wi, wj) = best;
    let (p_start, p_end) = (track.word_spans[wi].0, track.word_spans[wj - 1].1);
    let mut flags = vec![false; track.len()];
    flags[p_start..p_end].iter_mut().for_each(|f| *f = true);
    let frame_mask = expand_frame_mask(&flags, &track.durations_frames);
    let plan = EditPlan {
        original: track.clone(),
        edited: track.clone(),
        flag_del: flags.clone(),
        flag_add: flags,
        frame_mask,
    };
    plan.validate()?;
    Ok(plan)
}

/// Per-frame loss weights: 1 on unmasked frames, `lambda` on masked ones.
pub fn biased_frame_weights(plan: &EditPlan, lambda: f64) -> Result<Vec<f64>> {
    if lambda < 0.0 {
        return Err(Error::Validation("lambda must be >= 0".into()));
    }
    Ok(plan
        .frame_mask
        .iter()
        .map(|m| if *m { lambda } else { 1.0 })
        .collect())
}

/// Partial-inference comparison baseline: overwrite the unedited frame
/// spans of a generated mel with the original frames. `edited_durations`
/// are the durations the generated mel was decoded with.
pub fn splice_mel(generated: &Matrix, original_mel: &Matrix, plan: &EditPlan,
                  edited_durations: &[usize]) -> Result<Matrix> {
    if edited_durations.len() != plan.edited.len() {
        return Err(Error::Shape("durations do not match the edited track".into()));
    }
    let gen_total: usize = edited_durations.iter().sum();
    if gen_total != generated.nrows() {
        return Err(Error::Shape(format!(
            "generated mel has {} frames, durations cover {gen_total}",
            generated.nrows()
        )));
    }
    if plan.original.total_frames() != original_mel.nrows() {
        return Err(Error::Shape(format!(
            "original mel has {} frames, alignment covers {}",
            original_mel.nrows(),
            plan.original.total_frames()
        )));
    }
    let mut out = generated.clone();
    // cursor over original frames, skipping deleted phonemes
    let mut orig_starts = Vec::with_capacity(plan.original.len());
    let mut acc = 0;
    for &d in &plan.original.durations_frames {
        orig_starts.push(acc);
        acc += d;
    }
    let surviving: Vec<usize> = (0..plan.original.len())
        .filter(|&p| !plan.flag_del[p])
        .collect();
    let mut survivor = 0;
    let mut gen_cursor = 0;
    for (e, &d) in edited_durations.iter().enumerate() {
        if !plan.flag_add[e] {
            let o = surviving[survivor];
            survivor += 1;
            if plan.edited.durations_frames[e] != plan.original.durations_frames[o] {
                return Err(Error::Validation(
                    "unedited phoneme changed duration; cannot splice".into(),
                ));
            }
            let src = orig_starts[o];
            for k in 0..d {
                for j in 0..out.ncols() {
                    out[(gen_cursor + k, j)] = original_mel[(src + k, j)];
                }
            }
        }
        gen_cursor += d;
    }
    Ok(out)
}
