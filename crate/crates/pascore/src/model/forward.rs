use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{sinusoidal_positions, ModelConfig};
use crate::nn::{NodeId, ParamSet, Tape, Tensor};
use crate::rng::site_id;
use crate::text::{BOS_ID, EOS_ID, MASK_ID};
use crate::train::MaskPattern;

/// Forward-pass mode. Training applies dropout with a mask determined by
/// (seed, site, step); evaluation is deterministic and dropout-free.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

pub struct EncoderOutput {
    pub node: NodeId,
    pub n_frames: usize,
}

pub struct DecodeOutput {
    /// Final decoder features (L x d_model), after the last layer norm.
    pub features: NodeId,
    /// Vocabulary logits (L x vocab_size).
    pub logits: NodeId,
    /// Attention node of the last decoder layer's cross-attention. Always
    /// present in eval mode; absent only if LayerDrop removed every layer in
    /// a training step.
    pub cross_attention: Option<NodeId>,
}

/// Wrap a payload sequence in BOS/EOS for the decoder.
pub fn with_sentinels(ids: &[u32]) -> Vec<u32> {
    let mut full = Vec::with_capacity(ids.len() + 2);
    full.push(BOS_ID);
    full.extend_from_slice(ids);
    full.push(EOS_ID);
    full
}

fn maybe_dropout(tape: &mut Tape, x: NodeId, cfg: &ModelConfig, mode: Mode, site: &str) -> Result<NodeId> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { seed, step } => tape.dropout(x, cfg.dropout, seed, site_id(site), step),
    }
}

fn layer_norm(tape: &mut Tape, x: NodeId, params: &ParamSet, prefix: &str) -> Result<NodeId> {
    let g = tape.param(params, &format!("{prefix}.g"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b)
}

fn projected_attention(
    tape: &mut Tape,
    q_src: NodeId,
    kv_src: NodeId,
    params: &ParamSet,
    prefix: &str,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(NodeId, NodeId)> {
    let wq = tape.param(params, &format!("{prefix}.wq"))?;
    let wk = tape.param(params, &format!("{prefix}.wk"))?;
    let wv = tape.param(params, &format!("{prefix}.wv"))?;
    let wo = tape.param(params, &format!("{prefix}.wo"))?;
    let q = tape.matmul(q_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let drop = match mode {
        Mode::Eval => None,
        Mode::Train { seed, step } => {
            Some((cfg.dropout, seed, site_id(&format!("{prefix}.probs")), step))
        }
    };
    let attn = tape.attention_dropped(q, k, v, cfg.n_heads, drop)?;
    let out = tape.matmul(attn, wo)?;
    Ok((out, attn))
}

fn ffn(tape: &mut Tape, x: NodeId, params: &ParamSet, prefix: &str) -> Result<NodeId> {
    let w1 = tape.param(params, &format!("{prefix}.w1"))?;
    let b1 = tape.param(params, &format!("{prefix}.b1"))?;
    let w2 = tape.param(params, &format!("{prefix}.w2"))?;
    let b2 = tape.param(params, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

/// Run the convolutional subsampler and transformer encoder over log-mel
/// frames. Pre-norm blocks with a final layer norm.
pub fn encode_audio(
    tape: &mut Tape,
    mel: &MelSpectrogram,
    params: &ParamSet,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<EncoderOutput> {
    let t_in = mel.n_frames();
    if t_in == 0 {
        return Err(Error::invalid_input("encode_audio: empty spectrogram"));
    }
    if mel.n_mels() != cfg.n_mel {
        return Err(Error::shape(format!(
            "encode_audio: {} mel channels, config wants {}",
            mel.n_mels(),
            cfg.n_mel
        )));
    }
    let t_sub = cfg.subsampled_len(t_in);
    if t_sub > cfg.max_positions {
        return Err(Error::invalid_input(format!(
            "encode_audio: {t_sub} subsampled frames exceed max_positions {}",
            cfg.max_positions
        )));
    }

    let mut x = tape.constant(Tensor::matrix(t_in, cfg.n_mel, mel.data().to_vec())?);
    for l in 0..cfg.conv_layers {
        let w = tape.param(params, &format!("enc.conv{l}.w"))?;
        let b = tape.param(params, &format!("enc.conv{l}.b"))?;
        x = tape.conv1d(x, w, b, cfg.conv_kernel, cfg.conv_stride)?;
        x = tape.gelu(x)?;
    }

    let pe = tape.constant(sinusoidal_positions(t_sub, cfg.d_model));
    x = tape.add(x, pe)?;
    x = maybe_dropout(tape, x, cfg, mode, "enc.pe")?;

    for l in 0..cfg.n_encoder_layers {
        if let Mode::Train { seed, step } = mode {
            let gate = crate::rng::counter_uniform(seed, site_id(&format!("enc.l{l}.layerdrop")), step, 0);
            if gate < cfg.encoder_layerdrop {
                continue;
            }
        }
        let normed = layer_norm(tape, x, params, &format!("enc.l{l}.ln1"))?;
        let (attn, _) = projected_attention(tape, normed, normed, params, &format!("enc.l{l}.attn"), cfg, mode)?;
        let attn = maybe_dropout(tape, attn, cfg, mode, &format!("enc.l{l}.attn.drop"))?;
        x = tape.add(x, attn)?;

        let normed = layer_norm(tape, x, params, &format!("enc.l{l}.ln2"))?;
        let ff = ffn(tape, normed, params, &format!("enc.l{l}.ffn"))?;
        let ff = maybe_dropout(tape, ff, cfg, mode, &format!("enc.l{l}.ffn.drop"))?;
        x = tape.add(x, ff)?;
    }
    let node = layer_norm(tape, x, params, "enc.ln_f")?;
    Ok(EncoderOutput { node, n_frames: t_sub })
}

fn decode_features(
    tape: &mut Tape,
    ids_full: &[u32],
    enc: &EncoderOutput,
    params: &ParamSet,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(NodeId, Option<NodeId>)> {
    if ids_full.is_empty() {
        return Err(Error::invalid_input("decode: empty token sequence"));
    }
    if ids_full.len() > cfg.max_positions {
        return Err(Error::invalid_input(format!(
            "decode: {} positions exceed max_positions {}",
            ids_full.len(),
            cfg.max_positions
        )));
    }
    let table = tape.param(params, "dec.embed")?;
    let mut x = tape.embed(table, ids_full)?;
    let pe = tape.constant(sinusoidal_positions(ids_full.len(), cfg.d_model));
    x = tape.add(x, pe)?;
    x = maybe_dropout(tape, x, cfg, mode, "dec.pe")?;

    let mut last_cross = None;
    for l in 0..cfg.n_decoder_layers {
        // LayerDrop: in training, whole decoder layers are skipped at random
        // so every layer learns to read the audio itself rather than relying
        // on its predecessors. Inference runs the full stack.
        if let Mode::Train { seed, step } = mode {
            let gate = crate::rng::counter_uniform(seed, site_id(&format!("dec.l{l}.layerdrop")), step, 0);
            if gate < cfg.decoder_layerdrop {
                continue;
            }
        }
        // Bidirectional self-attention: every position sees the whole text.
        let normed = layer_norm(tape, x, params, &format!("dec.l{l}.ln1"))?;
        let (attn, _) = projected_attention(tape, normed, normed, params, &format!("dec.l{l}.self"), cfg, mode)?;
        let attn = maybe_dropout(tape, attn, cfg, mode, &format!("dec.l{l}.self.drop"))?;
        x = tape.add(x, attn)?;

        let normed = layer_norm(tape, x, params, &format!("dec.l{l}.ln2"))?;
        let (cross, cross_weights) =
            projected_attention(tape, normed, enc.node, params, &format!("dec.l{l}.cross"), cfg, mode)?;
        let cross = maybe_dropout(tape, cross, cfg, mode, &format!("dec.l{l}.cross.drop"))?;
        x = tape.add(x, cross)?;
        last_cross = Some(cross_weights);

        let normed = layer_norm(tape, x, params, &format!("dec.l{l}.ln3"))?;
        let ff = ffn(tape, normed, params, &format!("dec.l{l}.ffn"))?;
        let ff = maybe_dropout(tape, ff, cfg, mode, &format!("dec.l{l}.ffn.drop"))?;
        x = tape.add(x, ff)?;
    }
    let features = layer_norm(tape, x, params, "dec.ln_f")?;
    Ok((features, last_cross))
}

/// Full decoder pass producing vocabulary logits at every position. The
/// input may contain MASK ids anywhere, including everywhere.
pub fn decode_bidirectional(
    tape: &mut Tape,
    ids_full: &[u32],
    enc: &EncoderOutput,
    params: &ParamSet,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<DecodeOutput> {
    let (features, cross_attention) = decode_features(tape, ids_full, enc, params, cfg, mode)?;
    let w = tape.param(params, "dec.out.w")?;
    let b = tape.param(params, "dec.out.b")?;
    let logits = tape.matmul(features, w)?;
    let logits = tape.add_row(logits, b)?;
    Ok(DecodeOutput { features, logits, cross_attention })
}

/// Masked prediction loss: replace the selected payload positions with MASK,
/// run the model, and return the NLL averaged over those positions.
pub fn masked_nll(
    tape: &mut Tape,
    mel: &MelSpectrogram,
    ids: &[u32],
    mask: &MaskPattern,
    params: &ParamSet,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<NodeId> {
    mask.check_against(ids.len())?;
    let targets = with_sentinels(ids);
    let mut masked = targets.clone();
    let mut positions = Vec::with_capacity(mask.positions().len());
    for &p in mask.positions() {
        masked[p + 1] = MASK_ID;
        positions.push(p + 1);
    }
    let enc = encode_audio(tape, mel, params, cfg, mode)?;
    let out = decode_bidirectional(tape, &masked, &enc, params, cfg, mode)?;
    tape.cross_entropy_mean(out.logits, &targets, &positions)
}

/// Regression scores from the fine-tuning head: one real value per position
/// of the full, unmasked input (including BOS/EOS rows; callers slice out the
/// payload).
pub fn score_head_forward(
    tape: &mut Tape,
    ids_full: &[u32],
    enc: &EncoderOutput,
    params: &ParamSet,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<NodeId> {
    if ids_full.contains(&MASK_ID) {
        return Err(Error::invalid_input("score_head_forward: input must not contain MASK"));
    }
    if !crate::model::has_score_head(params) {
        return Err(Error::InvalidState("score head not present (model not fine-tuned)".into()));
    }
    let (features, _) = decode_features(tape, ids_full, enc, params, cfg, mode)?;
    let w = tape.param(params, "head.w")?;
    let b = tape.param(params, "head.b")?;
    let scores = tape.matmul(features, w)?;
    tape.add_row(scores, b)
}
