//! Parameter layout shared by initialization, binding and checkpoints.

use super::{ModelConfig, ModelError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug)]
pub struct Attention<P> {
    pub norm: Norm<P>,
    pub query: P,
    pub key: P,
    pub value: P,
    pub output: P,
}

#[derive(Clone, Debug)]
pub struct FeedForward<P> {
    pub norm: Norm<P>,
    pub w_in: P,
    pub b_in: P,
    pub w_out: P,
    pub b_out: P,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<P> {
    pub self_attn: Attention<P>,
    pub ffn: FeedForward<P>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer<P> {
    pub self_attn: Attention<P>,
    pub cross_attn: Attention<P>,
    pub ffn: FeedForward<P>,
}

/// Every weight of the model, generic over the handle type.
#[derive(Clone, Debug)]
pub struct Weights<P> {
    pub token_embedding: P,
    pub image_proj: P,
    pub image_bias: P,
    pub image_cells: P,
    pub encoder: Vec<EncoderLayer<P>>,
    pub fusion: Attention<P>,
    pub encoder_norm: Norm<P>,
    pub decoder: Vec<DecoderLayer<P>>,
    pub decoder_norm: Norm<P>,
    pub head: P,
    pub head_bias: P,
}

impl<P> Weights<P> {
    /// Walks the layout in a fixed order, asking `make` for each named handle.
    pub fn build<E>(cfg: &ModelConfig, mut make: impl FnMut(&str, &[usize]) -> Result<P, E>) -> Result<Self, E> {
        let mut f = |name: String, shape: Vec<usize>, _init: Init| make(&name, &shape);
        build_with(cfg, &mut f)
    }
}

impl Weights<()> {
    pub fn spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut f = |name: String, shape: Vec<usize>, init: Init| -> Result<(), ModelError> {
            out.push((name, shape, init));
            Ok(())
        };
        build_with(cfg, &mut f).expect("collecting the layout cannot fail");
        out
    }

    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Self::spec(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }
}

fn build_with<P, E>(
    cfg: &ModelConfig,
    f: &mut impl FnMut(String, Vec<usize>, Init) -> Result<P, E>,
) -> Result<Weights<P>, E> {
    let (d, v, ff) = (cfg.d_model, cfg.vocab_size, cfg.d_ff());
    let proj = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());

    let mut norm = |f: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<P, E>, prefix: &str| -> Result<Norm<P>, E> {
        Ok(Norm {
            gamma: f(format!("{prefix}.gamma"), vec![d], Init::Ones)?,
            beta: f(format!("{prefix}.beta"), vec![d], Init::Zeros)?,
        })
    };
    let attention =
        |f: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<P, E>,
         norm: &mut dyn FnMut(&mut dyn FnMut(String, Vec<usize>, Init) -> Result<P, E>, &str) -> Result<Norm<P>, E>,
         prefix: &str|
         -> Result<Attention<P>, E> {
            Ok(Attention {
                norm: norm(f, &format!("{prefix}.norm"))?,
                query: f(format!("{prefix}.query"), vec![d, d], proj(d))?,
                key: f(format!("{prefix}.key"), vec![d, d], proj(d))?,
                value: f(format!("{prefix}.value"), vec![d, d], proj(d))?,
                output: f(format!("{prefix}.output"), vec![d, d], proj(d))?,
            })
        };
    let feed_forward =
        |f: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<P, E>,
         norm: &mut dyn FnMut(&mut dyn FnMut(String, Vec<usize>, Init) -> Result<P, E>, &str) -> Result<Norm<P>, E>,
         prefix: &str|
         -> Result<FeedForward<P>, E> {
            Ok(FeedForward {
                norm: norm(f, &format!("{prefix}.norm"))?,
                w_in: f(format!("{prefix}.w_in"), vec![d, ff], proj(d))?,
                b_in: f(format!("{prefix}.b_in"), vec![ff], Init::Zeros)?,
                w_out: f(format!("{prefix}.w_out"), vec![ff, d], proj(ff))?,
                b_out: f(format!("{prefix}.b_out"), vec![d], Init::Zeros)?,
            })
        };

    let token_embedding = f("embed.token".into(), vec![v, d], Init::Normal(1.0))?;
    let image_proj = f("image.proj".into(), vec![cfg.image_feature_dim, d], proj(cfg.image_feature_dim))?;
    let image_bias = f("image.bias".into(), vec![d], Init::Zeros)?;
    let image_cells = f("image.cells".into(), vec![cfg.image_cells, d], Init::Normal(1.0))?;
    let mut encoder = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        encoder.push(EncoderLayer {
            self_attn: attention(f, &mut norm, &format!("encoder.{l}.self_attn"))?,
            ffn: feed_forward(f, &mut norm, &format!("encoder.{l}.ffn"))?,
        });
    }
    let fusion = attention(f, &mut norm, "fusion")?;
    let encoder_norm = norm(f, "encoder.norm")?;
    let mut decoder = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        decoder.push(DecoderLayer {
            self_attn: attention(f, &mut norm, &format!("decoder.{l}.self_attn"))?,
            cross_attn: attention(f, &mut norm, &format!("decoder.{l}.cross_attn"))?,
            ffn: feed_forward(f, &mut norm, &format!("decoder.{l}.ffn"))?,
        });
    }
    let decoder_norm = norm(f, "decoder.norm")?;
    let head = f("head.weight".into(), vec![d, v], proj(d))?;
    let head_bias = f("head.bias".into(), vec![v], Init::Zeros)?;
    Ok(Weights {
        token_embedding,
        image_proj,
        image_bias,
        image_cells,
        encoder,
        fusion,
        encoder_norm,
        decoder,
        decoder_norm,
        head,
        head_bias,
    })
}
