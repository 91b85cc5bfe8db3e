//! The full model: conditioning encoders, prior/duration/alignment/flow losses
//! for one utterance, and synthesis.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{
    cfm_loss_graph, cfm_target, decode_ode, duration_loss_graph, durations_from_alignment, inference_durations,
    mas_align, prior_loss_graph, sample_xt_with_noise, standard_normal, Alignment, BoundDecoder, Decoder,
    DurationPredictor, FusionEncoder, SpeakerEncoder, SpeakerInput, TextEncoder, DEFAULT_SIGMA_MIN,
};
use crate::corpus::{BreakAnnotation, MelSpectrogram, Utterance, N_MELS};
use crate::error::{Error, Result};
use crate::intonation::{IntonationDims, IntonationEncoder, ReferenceIntonation};
use crate::nn::{Grads, Graph, NodeId, ParamStore};
use crate::phrasing::{
    detect_breaks_silence, insert_break_tokens, BreakEmbedding, ExtendedPhoneSequence, TokenOrigin,
    DEFAULT_MIN_GAP_FRAMES,
};
use crate::pitch::{
    extract_last_word_segments, process_contour, shift_segment, PitchShapeSegment, DEFAULT_F_MAX, DEFAULT_F_MIN,
    DEFAULT_SMOOTH_WINDOW,
};
use crate::text_aligner::{alignment_loss_graph, TextAligner};

/// Architecture and signal-processing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_phones: usize,
    pub n_speakers: usize,
    pub n_mels: usize,
    pub d_model: usize,
    pub text_blocks: usize,
    /// Weight of the sinusoidal position signal in the text encoder.
    #[serde(default)]
    pub position_scale: f64,
    pub fusion_blocks: usize,
    pub attn_heads: usize,
    pub ff_hidden: usize,
    pub d_ref: usize,
    pub n_style_tokens: usize,
    pub d_token: usize,
    pub token_heads: usize,
    pub d_word: usize,
    pub d_speaker: usize,
    pub d_external_speaker: usize,
    pub speaker_hidden: usize,
    pub duration_hidden: usize,
    pub decoder_channels: usize,
    pub decoder_blocks: usize,
    pub d_time: usize,
    pub sigma_min: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub smooth_window: usize,
    pub min_gap_frames: usize,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy(n_phones: usize, n_speakers: usize) -> Self {
        Self {
            n_phones,
            n_speakers,
            n_mels: N_MELS,
            d_model: 192,
            text_blocks: 2,
            // Off: with positions the encoder memorises per-utterance alignments
            // on a tiny corpus instead of tying priors to phone identity.
            position_scale: 0.0,
            fusion_blocks: 2,
            attn_heads: 2,
            ff_hidden: 384,
            d_ref: 128,
            n_style_tokens: 6,
            d_token: 64,
            token_heads: 4,
            d_word: 64,
            d_speaker: 64,
            d_external_speaker: 512,
            speaker_hidden: 128,
            duration_hidden: 128,
            decoder_channels: 128,
            decoder_blocks: 3,
            d_time: 64,
            sigma_min: DEFAULT_SIGMA_MIN,
            f_min: DEFAULT_F_MIN,
            f_max: DEFAULT_F_MAX,
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            min_gap_frames: DEFAULT_MIN_GAP_FRAMES,
        }
    }

    /// A model with fewer than a thousand parameters, for gradient checks.
    pub fn tiny(n_phones: usize, n_speakers: usize, n_mels: usize) -> Self {
        Self {
            n_mels,
            d_model: 4,
            text_blocks: 1,
            fusion_blocks: 0,
            attn_heads: 2,
            ff_hidden: 2,
            d_ref: 4,
            n_style_tokens: 4,
            d_token: 4,
            token_heads: 2,
            d_word: 4,
            d_speaker: 4,
            d_external_speaker: 2,
            speaker_hidden: 2,
            duration_hidden: 2,
            decoder_channels: 3,
            decoder_blocks: 1,
            d_time: 4,
            ..Self::toy(n_phones, n_speakers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_phones == 0 || self.n_speakers == 0 || self.n_mels == 0 {
            return bad("n_phones, n_speakers and n_mels must be positive");
        }
        if !self.d_model.is_multiple_of(self.attn_heads.max(1)) || self.attn_heads == 0 {
            return bad("d_model must be divisible by attn_heads");
        }
        if self.token_heads == 0 || !self.d_token.is_multiple_of(self.token_heads) || self.token_heads > 8 {
            return bad("d_token must split into 1..=8 token heads");
        }
        if !(self.sigma_min > 0.0) {
            return bad("sigma_min must be positive");
        }
        if !(self.f_min <= self.f_max) {
            return bad("f_min must not exceed f_max");
        }
        if self.smooth_window.is_multiple_of(2) {
            return bad("smooth_window must be odd");
        }
        Ok(())
    }

    /// Fixed offset subtracted from reference segments at inference.
    pub fn inference_offset(&self) -> f64 {
        0.5 * (self.f_min + self.f_max)
    }
}

/// Per-term loss weights; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cfm: f64,
    pub prior: f64,
    pub dur: f64,
    pub tp_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cfm: 1.0,
            prior: 1.0,
            dur: 1.0,
            tp_align: 1.0,
        }
    }
}

/// The four loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cfm: f64,
    pub prior: f64,
    pub dur: f64,
    pub tp_align: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 4] = ["cfm", "prior", "dur", "tp_align"];

    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("cfm", self.cfm),
            ("prior", self.prior),
            ("dur", self.dur),
            ("tp_align", self.tp_align),
        ]
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self.cfm, self.prior, self.dur, self.tp_align, w)
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cfm: self.cfm * s,
            prior: self.prior * s,
            dur: self.dur * s,
            tp_align: self.tp_align * s,
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.cfm += o.cfm;
        self.prior += o.prior;
        self.dur += o.dur;
        self.tp_align += o.tp_align;
    }
}

/// Weighted sum of the four terms.
pub fn total_loss(cfm: f64, prior: f64, dur: f64, tp_align: f64, w: &LossWeights) -> f64 {
    w.cfm * cfm + w.prior * prior + w.dur * dur + w.tp_align * tp_align
}

/// Everything the loss of one utterance depends on, with the random draws made.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub words: Vec<String>,
    pub phones: Vec<usize>,
    pub word_spans: Vec<(usize, usize)>,
    pub breaks: BreakAnnotation,
    pub speaker: SpeakerInput,
    /// Perturbed last-word pitch shape segments.
    pub segments: Vec<PitchShapeSegment>,
    /// Target mel, `T × n_mels`.
    pub mel: Array2<f64>,
    pub t: f64,
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
}

/// Conditioning nodes for one utterance.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub extended: ExtendedPhoneSequence,
    pub hidden: NodeId,
    pub mu: NodeId,
    /// Text last-word embeddings, `K × d_model`.
    pub last_word_text: Option<NodeId>,
    pub reference: Option<ReferenceIntonation>,
    /// Intonation vector per token.
    pub intonation: NodeId,
}

/// Conditioning inputs shared by training and synthesis.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub words: &'a [String],
    pub phones: &'a [usize],
    pub word_spans: &'a [(usize, usize)],
    pub breaks: &'a BreakAnnotation,
    pub speaker: &'a SpeakerInput,
    pub segments: &'a [PitchShapeSegment],
}

#[derive(Debug, Clone)]
pub struct ProsodyModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text_encoder: TextEncoder,
    pub break_embedding: BreakEmbedding,
    pub intonation: IntonationEncoder,
    pub text_aligner: TextAligner,
    pub speaker: SpeakerEncoder,
    pub fusion: FusionEncoder,
    pub duration: DurationPredictor,
    pub decoder: Decoder,
    /// Optimizer steps applied so far.
    pub trained_steps: u64,
    words: Vec<String>,
}

/// Checkpoint sections, in storage order.
pub const SECTIONS: [&str; 8] = [
    "text_encoder",
    "phrasing",
    "intonation",
    "text_aligner",
    "speaker",
    "fusion",
    "duration",
    "decoder",
];

impl ProsodyModel {
    /// Fresh parameters from `seed`. `words` is the text-aligner vocabulary.
    pub fn new(config: ModelConfig, words: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let mut text_encoder = TextEncoder::new(
            &mut store,
            &mut rng,
            c.n_phones + 1,
            d,
            c.text_blocks,
            c.attn_heads,
            c.ff_hidden,
        );
        text_encoder.position_scale = c.position_scale;
        let break_embedding = BreakEmbedding::new(&mut store, &mut rng, d);
        let intonation = IntonationEncoder::new(
            &mut store,
            &mut rng,
            IntonationDims {
                d_ref: c.d_ref,
                n_tokens: c.n_style_tokens,
                d_token: c.d_token,
                heads: c.token_heads,
                d_out: d,
            },
        );
        let text_aligner = TextAligner::new(&mut store, &mut rng, words, c.d_word, d);
        let speaker = SpeakerEncoder::new(
            &mut store,
            &mut rng,
            c.n_speakers,
            c.d_external_speaker,
            c.speaker_hidden,
            c.d_speaker,
        );
        let fusion = FusionEncoder::new(
            &mut store,
            &mut rng,
            3 * d + c.d_speaker,
            d,
            c.fusion_blocks,
            c.attn_heads,
            c.ff_hidden,
            c.n_mels,
        );
        let duration = DurationPredictor::new(&mut store, &mut rng, d, c.duration_hidden);
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            c.n_mels,
            c.decoder_channels,
            c.decoder_blocks,
            c.d_time,
        );
        Ok(Self {
            config,
            store,
            text_encoder,
            break_embedding,
            intonation,
            text_aligner,
            speaker,
            fusion,
            duration,
            decoder,
            trained_steps: 0,
            words: words.to_vec(),
        })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    pub fn brk_id(&self) -> usize {
        self.config.n_phones
    }

    /// Builds the conditioning graph: text, breaks, intonation and speaker
    /// channels fused into per-token hidden states and prior means.
    pub fn encode(&self, g: &mut Graph, cond: Conditioning<'_>) -> Result<Encoded> {
        let store = &self.store;
        let extended = insert_break_tokens(cond.phones, cond.word_spans, cond.breaks)?;
        if extended.is_empty() {
            return Err(Error::InvalidArgument("empty phone sequence".into()));
        }
        if let Some(&bad) = cond.phones.iter().find(|&&p| p >= self.config.n_phones) {
            return Err(Error::InvalidArgument(format!("phone id {bad} outside the inventory")));
        }
        let word_pos = extended.word_positions(cond.word_spans);
        let text = self
            .text_encoder
            .forward_in_words(g, store, &extended.ids(self.brk_id()), Some(&word_pos))?;
        let brk = self.break_embedding.embed(g, store, &extended, cond.breaks);

        let reference = if cond.segments.is_empty() {
            None
        } else {
            Some(self.intonation.encode_reference(g, store, cond.segments)?)
        };
        let last_word_text = self.text_aligner.embed(g, store, cond.words, cond.breaks)?;
        let phrase = extended.phrase_index();
        let intonation = match last_word_text {
            Some(e) => {
                let aligned = self.intonation.align(g, store, e, reference.as_ref())?;
                let k = g.shape(aligned).0;
                let fallback = self.intonation.default_rows(g, store, 1);
                let table = g.concat_rows(&[aligned, fallback]);
                let idx: Vec<usize> = phrase.iter().map(|&p| p.min(k)).collect();
                g.gather_rows(table, &idx)
            }
            None => self.intonation.default_rows(g, store, extended.len()),
        };
        let spk = self.speaker.forward(g, store, cond.speaker)?;
        let fused = self.fusion.forward(g, store, text, brk, intonation, spk)?;
        Ok(Encoded {
            extended,
            hidden: fused.hidden,
            mu: fused.mu,
            last_word_text,
            reference,
            intonation,
        })
    }

    /// Draws the random parts of a training example: perturbed last-word
    /// segments, t, x0 and the path noise.
    pub fn sample(&self, utt: &Utterance, rng: &mut impl Rng) -> Result<TrainSample> {
        let c = &self.config;
        let breaks = detect_breaks_silence(utt, c.min_gap_frames).locations();
        let contour = process_contour(&utt.pitch, c.smooth_window).map_err(|e| Error::Load {
            id: utt.id.clone(),
            reason: e.to_string(),
        })?;
        let segments = extract_last_word_segments(&contour, &utt.frame_word_alignment, &breaks, rng, c.f_min, c.f_max)?;
        let mel = utt.mel.to_f64();
        if mel.ncols() != c.n_mels {
            return Err(Error::LengthMismatch(format!(
                "{}: mel has {} bins, model {}",
                utt.id,
                mel.ncols(),
                c.n_mels
            )));
        }
        let t: f64 = rng.random();
        let x0 = standard_normal(rng, mel.nrows(), mel.ncols());
        let eps = standard_normal(rng, mel.nrows(), mel.ncols());
        Ok(TrainSample {
            words: utt.words.clone(),
            phones: utt.phones.clone(),
            word_spans: utt.word_spans.clone(),
            breaks,
            speaker: SpeakerInput::Id(utt.speaker_id),
            segments,
            mel,
            t,
            x0,
            eps,
        })
    }

    fn conditioning<'a>(&self, s: &'a TrainSample) -> Conditioning<'a> {
        Conditioning {
            words: &s.words,
            phones: &s.phones,
            word_spans: &s.word_spans,
            breaks: &s.breaks,
            speaker: &s.speaker,
            segments: &s.segments,
        }
    }

    /// MAS alignment of the sample's frames to the current priors.
    pub fn align(&self, s: &TrainSample) -> Result<Alignment> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, self.conditioning(s))?;
        mas_align(&s.mel, g.value(enc.mu))
    }

    /// Builds all four losses for a sample under a fixed alignment. Returns
    /// the graph, the per-term values, and the weighted total node (`None`
    /// when every weight is zero).
    pub fn losses(
        &self,
        s: &TrainSample,
        alignment: &Alignment,
        w: &LossWeights,
    ) -> Result<(Graph, LossBreakdown, Option<NodeId>)> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, self.conditioning(s))?;
        alignment.validate(enc.extended.len())?;
        if alignment.frames() != s.mel.nrows() {
            return Err(Error::LengthMismatch(format!(
                "alignment has {} frames, mel {}",
                alignment.frames(),
                s.mel.nrows()
            )));
        }
        let mu_aligned = g.gather_rows(enc.mu, alignment.as_slice());
        let prior = prior_loss_graph(&mut g, &s.mel, mu_aligned)?;

        let log_d = self.duration.forward(&mut g, &self.store, enc.hidden);
        let dur = duration_loss_graph(&mut g, log_d, &durations_from_alignment(alignment))?;

        let tp = match (enc.last_word_text, enc.reference) {
            (Some(e), Some(r)) => Some(alignment_loss_graph(&mut g, e, r.keys)?),
            (None, None) => None,
            _ => {
                return Err(Error::LengthMismatch(
                    "transcript and reference disagree on last words".into(),
                ))
            }
        };

        let xt = sample_xt_with_noise(&s.x0, &s.mel, s.t, self.config.sigma_min, &s.eps)?;
        let xt = g.constant(xt);
        let u = self.decoder.forward(&mut g, &self.store, xt, mu_aligned, s.t);
        let cfm = cfm_loss_graph(&mut g, u, &cfm_target(&s.x0, &s.mel, self.config.sigma_min))?;

        let values = LossBreakdown {
            cfm: g.scalar(cfm),
            prior: g.scalar(prior),
            dur: g.scalar(dur),
            tp_align: tp.map_or(0.0, |n| g.scalar(n)),
        };
        let mut total: Option<NodeId> = None;
        for (node, weight) in [
            (Some(cfm), w.cfm),
            (Some(prior), w.prior),
            (Some(dur), w.dur),
            (tp, w.tp_align),
        ] {
            let Some(node) = node else { continue };
            if weight == 0.0 {
                continue;
            }
            let term = g.scale(node, weight);
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        Ok((g, values, total))
    }

    /// Losses and gradients (scaled by `scale`) for one sample; MAS runs on the current parameters.
    pub fn sample_gradients(&self, s: &TrainSample, w: &LossWeights, scale: f64) -> Result<(LossBreakdown, Grads)> {
        let alignment = self.align(s)?;
        let (mut g, values, total) = self.losses(s, &alignment, w)?;
        let grads = match total {
            Some(t) => {
                let t = g.scale(t, scale);
                g.backward(t)
            }
            None => Grads::default(),
        };
        Ok((values, grads))
    }

    /// Inference: predicted durations, Euler decoding from seeded noise.
    pub fn synthesize(&self, req: &SynthesisRequest<'_>) -> Result<Synthesis> {
        if req.n_steps < 1 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        let (phones, word_spans) = req.phones;
        let mut g = Graph::new();
        let segments: Vec<PitchShapeSegment> = req
            .segments
            .iter()
            .map(|s| shift_segment(s, self.config.inference_offset()))
            .collect::<Result<_>>()?;
        let enc = self.encode(
            &mut g,
            Conditioning {
                words: req.words,
                phones,
                word_spans,
                breaks: req.breaks,
                speaker: req.speaker,
                segments: &segments,
            },
        )?;
        let log_d = self.duration.forward(&mut g, &self.store, enc.hidden);
        let log_d: Vec<f64> = g.value(log_d).iter().copied().collect();
        let durations = inference_durations(&log_d);
        let alignment = Alignment::from_durations(&durations)?;
        let mu_aligned = g.gather_rows(enc.mu, alignment.as_slice());
        let cond = g.value(mu_aligned).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let x0 = standard_normal(&mut rng, cond.nrows(), cond.ncols());
        let field = BoundDecoder {
            decoder: &self.decoder,
            store: &self.store,
        };
        let out = decode_ode(&field, &cond, &x0, req.n_steps)?;
        let mel = MelSpectrogram::new(out.mapv(|v| v as f32))?;
        Ok(Synthesis {
            mel,
            durations,
            extended: enc.extended,
            alignment,
            mu: g.value(enc.mu).clone(),
        })
    }
}

/// Inputs to [`ProsodyModel::synthesize`].
#[derive(Debug, Clone, Copy)]
pub struct SynthesisRequest<'a> {
    pub words: &'a [String],
    pub phones: (&'a [usize], &'a [(usize, usize)]),
    pub breaks: &'a BreakAnnotation,
    pub speaker: &'a SpeakerInput,
    /// Reference last-word segments on the Hz scale; the inference offset is
    /// subtracted before encoding.
    pub segments: &'a [PitchShapeSegment],
    pub n_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub durations: Vec<usize>,
    pub extended: ExtendedPhoneSequence,
    pub alignment: Alignment,
    pub mu: Array2<f64>,
}

impl Synthesis {
    /// Word index per frame, −1 on BRK frames.
    pub fn frame_word_alignment(&self) -> Vec<i64> {
        self.alignment
            .as_slice()
            .iter()
            .map(|&i| match self.extended.origin[i] {
                TokenOrigin::Phone { word, .. } => word as i64,
                TokenOrigin::Break { .. } => -1,
            })
            .collect()
    }

    /// Frame range `start..end` of a word's phones.
    pub fn word_frames(&self, word: usize) -> Option<(usize, usize)> {
        crate::pitch::word_frame_span(&self.frame_word_alignment(), word)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_utterances;

    fn tiny_model() -> (ProsodyModel, Vec<Utterance>) {
        let corpus = generate_utterances(2, 6, 1).unwrap();
        let cfg = ModelConfig::tiny(corpus.lexicon.n_phones(), 3, N_MELS);
        (
            ProsodyModel::new(cfg, &corpus.lexicon.words(), 0).unwrap(),
            corpus.utterances,
        )
    }

    #[test]
    fn tiny_config_is_small() {
        let cfg = ModelConfig::tiny(3, 2, 4);
        let words: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let m = ProsodyModel::new(cfg, &words, 0).unwrap();
        assert!(m.store.numel() <= 1000, "{}", m.store.numel());
    }

    #[test]
    fn loss_terms_sum_to_total() {
        let (m, utts) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = m.sample(&utts[0], &mut rng).unwrap();
        let a = m.align(&s).unwrap();
        let w = LossWeights::default();
        let (g, v, total) = m.losses(&s, &a, &w).unwrap();
        assert!(v.is_finite());
        assert!((g.scalar(total.unwrap()) - v.total(&w)).abs() < 1e-6 * v.total(&w).abs().max(1.0));
        let zero = LossWeights {
            cfm: 0.0,
            prior: 0.0,
            dur: 0.0,
            tp_align: 0.0,
        };
        assert!(m.losses(&s, &a, &zero).unwrap().2.is_none());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, &w), 10.0);
        assert_eq!(total_loss(1.0, 0.0, 3.0, 4.0, &w), 8.0);
        let only = LossWeights {
            cfm: 1.0,
            prior: 0.0,
            dur: 0.0,
            tp_align: 0.0,
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, &only), 1.0);
    }

    #[test]
    fn zeroing_intonation_changes_mu() {
        let (m, utts) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = m.sample(&utts[0], &mut rng).unwrap();
        let mut g = Graph::new();
        let enc = m.encode(&mut g, m.conditioning(&s)).unwrap();
        let mu = g.value(enc.mu).clone();
        let spk = m.speaker.forward(&mut g, &m.store, &s.speaker).unwrap();
        let ext = &enc.extended;
        let wp = ext.word_positions(&s.word_spans);
        let text = m
            .text_encoder
            .forward_in_words(&mut g, &m.store, &ext.ids(m.brk_id()), Some(&wp))
            .unwrap();
        let brk = m.break_embedding.embed(&mut g, &m.store, ext, &s.breaks);
        let zero = g.constant(Array2::zeros(g.shape(enc.intonation)));
        let ablated = m.fusion.forward(&mut g, &m.store, text, brk, zero, spk).unwrap();
        assert_eq!(g.shape(ablated.mu), (ext.len(), N_MELS));
        assert_ne!(&mu, g.value(ablated.mu));
    }

    #[test]
    fn synthesis_is_deterministic_and_accounts_frames() {
        let (m, utts) = tiny_model();
        let u = &utts[0];
        let contour = process_contour(&u.pitch, 9).unwrap();
        let segs = crate::pitch::slice_last_word_segments(&contour, &u.frame_word_alignment, &u.breaks).unwrap();
        let spk = SpeakerInput::Id(u.speaker_id);
        let req = SynthesisRequest {
            words: &u.words,
            phones: (&u.phones, &u.word_spans),
            breaks: &u.breaks,
            speaker: &spk,
            segments: &segs,
            n_steps: 4,
            seed: 7,
        };
        let a = m.synthesize(&req).unwrap();
        let b = m.synthesize(&req).unwrap();
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.mel.frames(), a.durations.iter().sum::<usize>());
        assert_eq!(a.extended.len(), u.phones.len() + u.breaks.len());
        assert!(a.durations.iter().all(|&d| d >= 1));
    }
}
