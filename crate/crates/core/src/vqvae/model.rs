use rand::Rng;

use crate::numerics::{
    dropout_backward, dropout_forward, gather_rows, relu_backward, relu_forward, scatter_rows, Conv1d, Conv1dCache,
    Embedding, LayerNorm, LayerNormCache, Linear, ParamSlot, Result, Scalar, Tensor,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub code_dim: usize,
    pub max_len: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 4099,
            embed_dim: 128,
            hidden_dim: 256,
            code_dim: 64,
            max_len: 150,
            kernel: 3,
            dropout: 0.1,
        }
    }
}

fn conv<T: Scalar, R: Rng + ?Sized>(name: &str, k: usize, cin: usize, cout: usize, rng: &mut R) -> Conv1d<T> {
    Conv1d::new(
        ParamSlot::xavier(format!("{name}.weight"), &[k, cin, cout], k * cin, k * cout, rng),
        ParamSlot::zeros(format!("{name}.bias"), &[cout], false),
    )
}

fn linear<T: Scalar, R: Rng + ?Sized>(name: &str, din: usize, dout: usize, rng: &mut R) -> Linear<T> {
    Linear::new(
        ParamSlot::xavier(format!("{name}.weight"), &[din, dout], din, dout, rng),
        ParamSlot::zeros(format!("{name}.bias"), &[dout], false),
    )
}

/// conv -> layernorm -> dropout -> relu, shared by encoder and decoder.
#[derive(Debug, Clone)]
pub struct ConvBlock<T = f32> {
    pub conv: Conv1d<T>,
    pub norm: LayerNorm<T>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache<T> {
    conv: Conv1dCache<T>,
    norm: LayerNormCache<T>,
    drop: Option<Vec<T>>,
    out: Tensor<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, cin: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv: conv(&format!("{name}.conv"), cfg.kernel, cin, cfg.hidden_dim, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), cfg.hidden_dim),
        }
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        seq_len: usize,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
        let (c, conv) = self.conv.forward(x, seq_len)?;
        let (n, norm) = self.norm.forward(&c)?;
        let (d, drop) = dropout_forward(&n, p, train, rng);
        let out = relu_forward(&d);
        Ok((out.clone(), ConvBlockCache { conv, norm, drop, out }))
    }

    fn backward(&mut self, cache: &ConvBlockCache<T>, dout: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let d = relu_backward(&cache.out, dout);
        let d = dropout_backward(&d, cache.drop.as_deref());
        let d = self.norm.backward(&cache.norm, &d);
        self.conv.backward(&cache.conv, &d, input_grad)
    }

    fn params_mut(&mut self) -> [&mut ParamSlot<T>; 4] {
        [&mut self.conv.weight, &mut self.conv.bias, &mut self.norm.gain, &mut self.norm.shift]
    }

    fn params(&self) -> [&ParamSlot<T>; 4] {
        [&self.conv.weight, &self.conv.bias, &self.norm.gain, &self.norm.shift]
    }
}

/// Token embedding, two conv blocks and a projection to the code dimension.
#[derive(Debug, Clone)]
pub struct Encoder<T = f32> {
    pub embed: Embedding<T>,
    pub block1: ConvBlock<T>,
    pub block2: ConvBlock<T>,
    pub proj: Linear<T>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    ids: Vec<u32>,
    zero_rows: Option<Vec<bool>>,
    b1: ConvBlockCache<T>,
    b2: ConvBlockCache<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Encoder {
            embed: Embedding::new(ParamSlot::normal("encoder.embed", &[cfg.vocab_size, cfg.embed_dim], 0.02, rng)),
            block1: ConvBlock::new("encoder.block1", cfg, cfg.embed_dim, rng),
            block2: ConvBlock::new("encoder.block2", cfg, cfg.hidden_dim, rng),
            proj: linear("encoder.proj", cfg.hidden_dim, cfg.code_dim, rng),
            dropout: cfg.dropout,
        }
    }

    /// Encodes packed sequences (`ids.len()` a multiple of `seq_len`) into
    /// `z_e` of shape `[rows x code_dim]`. `zero_rows` zeroes embedding rows
    /// (token-dropout augmentation).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        ids: &[u32],
        seq_len: usize,
        zero_rows: Option<&[bool]>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let e = self.embed.forward(ids, zero_rows)?;
        let (h1, b1) = self.block1.forward(&e, seq_len, self.dropout, train, rng)?;
        let (h2, b2) = self.block2.forward(&h1, seq_len, self.dropout, train, rng)?;
        let z_e = self.proj.forward(&h2)?;
        Ok((z_e, EncoderCache { ids: ids.to_vec(), zero_rows: zero_rows.map(<[bool]>::to_vec), b1, b2 }))
    }

    pub fn backward(&mut self, cache: &EncoderCache<T>, dz_e: &Tensor<T>) {
        let dh2 = self.proj.backward(&cache.b2.out, dz_e, true).unwrap();
        let dh1 = self.block2.backward(&cache.b2, &dh2, true).unwrap();
        let de = self.block1.backward(&cache.b1, &dh1, true).unwrap();
        self.embed.backward(&cache.ids, cache.zero_rows.as_deref(), &de);
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = vec![&mut self.embed.table];
        v.extend(self.block1.params_mut());
        v.extend(self.block2.params_mut());
        v.push(&mut self.proj.weight);
        v.push(&mut self.proj.bias);
        v
    }

    pub fn params(&self) -> Vec<&ParamSlot<T>> {
        let mut v = vec![&self.embed.table];
        v.extend(self.block1.params());
        v.extend(self.block2.params());
        v.push(&self.proj.weight);
        v.push(&self.proj.bias);
        v
    }
}

/// Mirror of the encoder: two conv blocks then a projection to vocabulary logits.
#[derive(Debug, Clone)]
pub struct Decoder<T = f32> {
    pub block1: ConvBlock<T>,
    pub block2: ConvBlock<T>,
    pub out: Linear<T>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    b1: ConvBlockCache<T>,
    b2: ConvBlockCache<T>,
    rows: Option<Vec<usize>>,
    hidden: Tensor<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Decoder {
            block1: ConvBlock::new("decoder.block1", cfg, cfg.code_dim, rng),
            block2: ConvBlock::new("decoder.block2", cfg, cfg.hidden_dim, rng),
            out: linear("decoder.out", cfg.hidden_dim, cfg.vocab_size, rng),
            dropout: cfg.dropout,
        }
    }

    /// Logits for the listed rows only (all rows when `rows` is `None`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        z_q: &Tensor<T>,
        seq_len: usize,
        rows: Option<&[usize]>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let (h1, b1) = self.block1.forward(z_q, seq_len, self.dropout, train, rng)?;
        let (h2, b2) = self.block2.forward(&h1, seq_len, self.dropout, train, rng)?;
        let hidden = match rows {
            Some(r) => gather_rows(&h2, r),
            None => h2,
        };
        let logits = self.out.forward(&hidden)?;
        Ok((logits, DecoderCache { b1, b2, rows: rows.map(<[usize]>::to_vec), hidden }))
    }

    /// Returns the gradient with respect to the decoder input.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let dh = self.out.backward(&cache.hidden, dlogits, true).unwrap();
        let dh2 = match &cache.rows {
            Some(r) => scatter_rows(&dh, r, cache.b2.out.rows()),
            None => dh,
        };
        let dh1 = self.block2.backward(&cache.b2, &dh2, true).unwrap();
        self.block1.backward(&cache.b1, &dh1, true).unwrap()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v: Vec<&mut ParamSlot<T>> = Vec::new();
        v.extend(self.block1.params_mut());
        v.extend(self.block2.params_mut());
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }

    pub fn params(&self) -> Vec<&ParamSlot<T>> {
        let mut v: Vec<&ParamSlot<T>> = Vec::new();
        v.extend(self.block1.params());
        v.extend(self.block2.params());
        v.push(&self.out.weight);
        v.push(&self.out.bias);
        v
    }
}

/// All gradient-trained weights of the autoencoder.
#[derive(Debug, Clone)]
pub struct ModelParameters<T = f32> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let encoder = Encoder::new(&config, rng);
        let decoder = Decoder::new(&config, rng);
        ModelParameters { config, encoder, decoder }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&ParamSlot<T>> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(ParamSlot::zero_grad);
    }
}
