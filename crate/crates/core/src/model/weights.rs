//! Weight containers, initialization, and the versioned weight file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{Arch, ModelConfig};
use crate::numerics::{Matrix, Rng};
use crate::report::write_atomic;

/// Current weight file format.
pub const FORMAT_VERSION: u32 = 1;

/// Per-head projections. `w_q`, `w_k`, `w_v` are `d_model x d_head`;
/// `w_o` is `d_head x d_model` and writes into the residual stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnWeights {
    pub heads: Vec<HeadWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// One pre-norm transformer layer. Cross-attention fields are present only
/// in decoder layers of the encoder-decoder model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub norm_self: Vec<f64>,
    pub self_attn: AttnWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_cross: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attn: Option<AttnWeights>,
    pub norm_mlp: Vec<f64>,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedWeights {
    /// Token table, `total_vocab x d_model`.
    Tokens { table: Matrix },
    /// Linear patch projection, `patch_len x d_model` plus bias.
    Patch { w: Matrix, b: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub embed: EmbedWeights,
    pub encoder: Vec<LayerWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_norm: Option<Vec<f64>>,
    pub decoder: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// Output map, `d_model x out_dim`.
    pub w_out: Matrix,
}

/// Config plus weights: the unit every pipeline passes around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

/// On-disk weight file with a version header.
#[derive(Debug, Serialize, Deserialize)]
struct WeightFile {
    format_version: u32,
    config: ModelConfig,
    weights: ModelWeights,
}

/// Scaled Gaussian init. Matrices that write into the residual stream (w_o,
/// MLP w_out) get std `0.02 / sqrt(layers)`; everything else 0.02. Gains
/// start at one, biases at zero.
pub fn init_weights(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelBundle> {
    cfg.validate()?;
    let std = 0.02;
    let std_resid = 0.02 / (cfg.layers as f64).sqrt();

    let head = |rng: &mut Rng| HeadWeights {
        w_q: Matrix::gaussian(cfg.d_model, cfg.d_head, std, rng),
        w_k: Matrix::gaussian(cfg.d_model, cfg.d_head, std, rng),
        w_v: Matrix::gaussian(cfg.d_model, cfg.d_head, std, rng),
        w_o: Matrix::gaussian(cfg.d_head, cfg.d_model, std_resid, rng),
    };
    let attn = |rng: &mut Rng| AttnWeights {
        heads: (0..cfg.heads).map(|_| head(rng)).collect(),
    };
    let layer = |rng: &mut Rng, cross: bool| LayerWeights {
        norm_self: vec![1.0; cfg.d_model],
        self_attn: attn(rng),
        norm_cross: cross.then(|| vec![1.0; cfg.d_model]),
        cross_attn: cross.then(|| attn(rng)),
        norm_mlp: vec![1.0; cfg.d_model],
        mlp: MlpWeights {
            w_in: Matrix::gaussian(cfg.d_model, cfg.d_ff, std, rng),
            b_in: vec![0.0; cfg.d_ff],
            w_out: Matrix::gaussian(cfg.d_ff, cfg.d_model, std_resid, rng),
            b_out: vec![0.0; cfg.d_model],
        },
    };

    let (embed, encoder, encoder_norm, decoder) = match &cfg.arch {
        Arch::EncoderDecoder { tokenizer } => {
            let embed = EmbedWeights::Tokens {
                table: Matrix::gaussian(tokenizer.total_vocab(), cfg.d_model, std, rng),
            };
            let encoder: Vec<_> = (0..cfg.layers).map(|_| layer(rng, false)).collect();
            let decoder: Vec<_> = (0..cfg.layers).map(|_| layer(rng, true)).collect();
            (embed, encoder, Some(vec![1.0; cfg.d_model]), decoder)
        }
        Arch::DecoderOnly { patch, .. } => {
            let embed = EmbedWeights::Patch {
                w: Matrix::gaussian(patch.patch_len, cfg.d_model, std, rng),
                b: vec![0.0; cfg.d_model],
            };
            let decoder: Vec<_> = (0..cfg.layers).map(|_| layer(rng, false)).collect();
            (embed, Vec::new(), None, decoder)
        }
    };

    let weights = ModelWeights {
        embed,
        encoder,
        encoder_norm,
        decoder,
        final_norm: vec![1.0; cfg.d_model],
        w_out: Matrix::gaussian(cfg.d_model, cfg.out_dim(), std, rng),
    };
    let bundle = ModelBundle { config: cfg.clone(), weights };
    validate_weights(&bundle)?;
    Ok(bundle)
}

/// Checks every tensor shape against the config. Run after load so a weight
/// file edited or paired with the wrong config is rejected up front.
pub fn validate_weights(bundle: &ModelBundle) -> Result<()> {
    let cfg = &bundle.config;
    cfg.validate()?;
    let w = &bundle.weights;
    let shape = |m: &Matrix, rows, cols, what: &str| {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "validate_weights",
                detail: format!("{what}: expected {rows}x{cols}, got {}x{}", m.rows(), m.cols()),
            });
        }
        Ok(())
    };
    let gain = |g: &[f64], what: &str| {
        if g.len() != cfg.d_model {
            return Err(Error::ShapeMismatch {
                op: "validate_weights",
                detail: format!("{what}: expected gain of {}, got {}", cfg.d_model, g.len()),
            });
        }
        Ok(())
    };

    match (&cfg.arch, &w.embed) {
        (Arch::EncoderDecoder { tokenizer }, EmbedWeights::Tokens { table }) => {
            shape(table, tokenizer.total_vocab(), cfg.d_model, "embed table")?;
        }
        (Arch::DecoderOnly { patch, .. }, EmbedWeights::Patch { w: pw, b }) => {
            shape(pw, patch.patch_len, cfg.d_model, "patch embed")?;
            if b.len() != cfg.d_model {
                return Err(Error::ShapeMismatch {
                    op: "validate_weights",
                    detail: format!("patch embed bias: expected {}, got {}", cfg.d_model, b.len()),
                });
            }
        }
        _ => {
            return Err(Error::ShapeMismatch {
                op: "validate_weights",
                detail: "embedding kind does not match architecture".into(),
            })
        }
    }

    let check_attn = |attn: &AttnWeights, what: &str| {
        if attn.heads.len() != cfg.heads {
            return Err(Error::ShapeMismatch {
                op: "validate_weights",
                detail: format!("{what}: expected {} heads, got {}", cfg.heads, attn.heads.len()),
            });
        }
        for (i, h) in attn.heads.iter().enumerate() {
            shape(&h.w_q, cfg.d_model, cfg.d_head, &format!("{what} head {i} w_q"))?;
            shape(&h.w_k, cfg.d_model, cfg.d_head, &format!("{what} head {i} w_k"))?;
            shape(&h.w_v, cfg.d_model, cfg.d_head, &format!("{what} head {i} w_v"))?;
            shape(&h.w_o, cfg.d_head, cfg.d_model, &format!("{what} head {i} w_o"))?;
        }
        Ok(())
    };
    let check_layer = |l: &LayerWeights, cross: bool, what: &str| {
        gain(&l.norm_self, &format!("{what} norm_self"))?;
        gain(&l.norm_mlp, &format!("{what} norm_mlp"))?;
        check_attn(&l.self_attn, &format!("{what} self_attn"))?;
        if cross != l.cross_attn.is_some() || cross != l.norm_cross.is_some() {
            return Err(Error::ShapeMismatch {
                op: "validate_weights",
                detail: format!("{what}: cross-attention presence does not match architecture"),
            });
        }
        if let Some(ca) = &l.cross_attn {
            check_attn(ca, &format!("{what} cross_attn"))?;
        }
        if let Some(g) = &l.norm_cross {
            gain(g, &format!("{what} norm_cross"))?;
        }
        shape(&l.mlp.w_in, cfg.d_model, cfg.d_ff, &format!("{what} mlp w_in"))?;
        shape(&l.mlp.w_out, cfg.d_ff, cfg.d_model, &format!("{what} mlp w_out"))?;
        if l.mlp.b_in.len() != cfg.d_ff || l.mlp.b_out.len() != cfg.d_model {
            return Err(Error::ShapeMismatch {
                op: "validate_weights",
                detail: format!("{what}: mlp bias lengths"),
            });
        }
        Ok(())
    };

    let expect_enc = if cfg.is_encoder_decoder() { cfg.layers } else { 0 };
    if w.encoder.len() != expect_enc || w.decoder.len() != cfg.layers {
        return Err(Error::ShapeMismatch {
            op: "validate_weights",
            detail: format!(
                "expected {} encoder / {} decoder layers, got {} / {}",
                expect_enc,
                cfg.layers,
                w.encoder.len(),
                w.decoder.len()
            ),
        });
    }
    if cfg.is_encoder_decoder() != w.encoder_norm.is_some() {
        return Err(Error::ShapeMismatch {
            op: "validate_weights",
            detail: "encoder final norm presence does not match architecture".into(),
        });
    }
    for (i, l) in w.encoder.iter().enumerate() {
        check_layer(l, false, &format!("encoder layer {i}"))?;
    }
    for (i, l) in w.decoder.iter().enumerate() {
        check_layer(l, cfg.is_encoder_decoder(), &format!("decoder layer {i}"))?;
    }
    if let Some(g) = &w.encoder_norm {
        gain(g, "encoder_norm")?;
    }
    gain(&w.final_norm, "final_norm")?;
    shape(&w.w_out, cfg.d_model, cfg.out_dim(), "w_out")?;
    Ok(())
}

/// Saves a bundle as versioned JSON.
pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let file = WeightFile {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        weights: bundle.weights.clone(),
    };
    write_atomic(path, serde_json::to_string(&file)?.as_bytes())
}

/// Loads and validates a bundle. Rejects unknown versions, malformed files,
/// and weights whose shapes disagree with the embedded config.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let version = header.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| {
        Error::Malformed {
            path: path.display().to_string(),
            detail: "missing format_version".into(),
        }
    })?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersion { found: version.to_string(), supported: FORMAT_VERSION });
    }
    let file: WeightFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let bundle = ModelBundle { config: file.config, weights: file.weights };
    validate_weights(&bundle)?;
    Ok(bundle)
}

fn visit_stack<'a>(name: &str, layers: &'a [LayerWeights], f: &mut impl FnMut(String, &'a [f64])) {
    for (li, layer) in layers.iter().enumerate() {
        f(format!("{name}.{li}.norm_self"), &layer.norm_self);
        for (hi, head) in layer.self_attn.heads.iter().enumerate() {
            f(format!("{name}.{li}.self_attn.{hi}.w_q"), head.w_q.data());
            f(format!("{name}.{li}.self_attn.{hi}.w_k"), head.w_k.data());
            f(format!("{name}.{li}.self_attn.{hi}.w_v"), head.w_v.data());
            f(format!("{name}.{li}.self_attn.{hi}.w_o"), head.w_o.data());
        }
        if let Some(g) = &layer.norm_cross {
            f(format!("{name}.{li}.norm_cross"), g);
        }
        if let Some(attn) = &layer.cross_attn {
            for (hi, head) in attn.heads.iter().enumerate() {
                f(format!("{name}.{li}.cross_attn.{hi}.w_q"), head.w_q.data());
                f(format!("{name}.{li}.cross_attn.{hi}.w_k"), head.w_k.data());
                f(format!("{name}.{li}.cross_attn.{hi}.w_v"), head.w_v.data());
                f(format!("{name}.{li}.cross_attn.{hi}.w_o"), head.w_o.data());
            }
        }
        f(format!("{name}.{li}.norm_mlp"), &layer.norm_mlp);
        f(format!("{name}.{li}.mlp.w_in"), layer.mlp.w_in.data());
        f(format!("{name}.{li}.mlp.b_in"), &layer.mlp.b_in);
        f(format!("{name}.{li}.mlp.w_out"), layer.mlp.w_out.data());
        f(format!("{name}.{li}.mlp.b_out"), &layer.mlp.b_out);
    }
}

fn visit_stack_mut(name: &str, layers: &mut [LayerWeights], f: &mut impl FnMut(String, &mut [f64])) {
    for (li, layer) in layers.iter_mut().enumerate() {
        f(format!("{name}.{li}.norm_self"), &mut layer.norm_self);
        for (hi, head) in layer.self_attn.heads.iter_mut().enumerate() {
            f(format!("{name}.{li}.self_attn.{hi}.w_q"), head.w_q.data_mut());
            f(format!("{name}.{li}.self_attn.{hi}.w_k"), head.w_k.data_mut());
            f(format!("{name}.{li}.self_attn.{hi}.w_v"), head.w_v.data_mut());
            f(format!("{name}.{li}.self_attn.{hi}.w_o"), head.w_o.data_mut());
        }
        if let Some(g) = &mut layer.norm_cross {
            f(format!("{name}.{li}.norm_cross"), g);
        }
        if let Some(attn) = &mut layer.cross_attn {
            for (hi, head) in attn.heads.iter_mut().enumerate() {
                f(format!("{name}.{li}.cross_attn.{hi}.w_q"), head.w_q.data_mut());
                f(format!("{name}.{li}.cross_attn.{hi}.w_k"), head.w_k.data_mut());
                f(format!("{name}.{li}.cross_attn.{hi}.w_v"), head.w_v.data_mut());
                f(format!("{name}.{li}.cross_attn.{hi}.w_o"), head.w_o.data_mut());
            }
        }
        f(format!("{name}.{li}.norm_mlp"), &mut layer.norm_mlp);
        f(format!("{name}.{li}.mlp.w_in"), layer.mlp.w_in.data_mut());
        f(format!("{name}.{li}.mlp.b_in"), &mut layer.mlp.b_in);
        f(format!("{name}.{li}.mlp.w_out"), layer.mlp.w_out.data_mut());
        f(format!("{name}.{li}.mlp.b_out"), &mut layer.mlp.b_out);
    }
}

impl ModelWeights {
    /// Visits every tensor in a fixed order, as named flat slices. The order
    /// defines the parameter layout used by the optimizer and the gradient
    /// checker.
    pub fn for_each_tensor<'a>(&'a self, f: &mut impl FnMut(String, &'a [f64])) {
        match &self.embed {
            EmbedWeights::Tokens { table } => f("embed.table".into(), table.data()),
            EmbedWeights::Patch { w, b } => {
                f("embed.w".into(), w.data());
                f("embed.b".into(), b);
            }
        }
        visit_stack("encoder", &self.encoder, f);
        if let Some(g) = &self.encoder_norm {
            f("encoder_norm".into(), g);
        }
        visit_stack("decoder", &self.decoder, f);
        f("final_norm".into(), &self.final_norm);
        f("w_out".into(), self.w_out.data());
    }

    /// Mutable twin of [`ModelWeights::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(String, &mut [f64])) {
        match &mut self.embed {
            EmbedWeights::Tokens { table } => f("embed.table".into(), table.data_mut()),
            EmbedWeights::Patch { w, b } => {
                f("embed.w".into(), w.data_mut());
                f("embed.b".into(), b);
            }
        }
        visit_stack_mut("encoder", &mut self.encoder, f);
        if let Some(g) = &mut self.encoder_norm {
            f("encoder_norm".into(), g);
        }
        visit_stack_mut("decoder", &mut self.decoder, f);
        f("final_norm".into(), &mut self.final_norm);
        f("w_out".into(), self.w_out.data_mut());
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.len());
        n
    }

    /// Copies every parameter into one flat vector, visitor order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_tensor(&mut |_, t| out.extend_from_slice(t));
        out
    }

    /// Writes a flat vector produced by [`ModelWeights::flatten`] back into
    /// the tensors.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        let mut overrun = false;
        self.for_each_tensor_mut(&mut |_, t| {
            if offset + t.len() > flat.len() {
                overrun = true;
                return;
            }
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        if overrun || offset != flat.len() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                detail: format!("flat vector holds {} values, weights hold {}", flat.len(), offset),
            });
        }
        Ok(())
    }

    /// A same-shaped copy with every parameter set to zero, used as a
    /// gradient accumulator.
    pub fn zeroed_like(&self) -> ModelWeights {
        let mut copy = self.clone();
        copy.for_each_tensor_mut(&mut |_, t| t.fill(0.0));
        copy
    }
}
