//! Semantic encoder, latent-conditioned denoiser and the two position heads.
//!
//! The encoder is a four-stage strided convolution stack pooled to `f_dim`.
//! The denoiser is a small U-shaped network predicting `x0` directly: each
//! residual block adds a projected sinusoidal time embedding and is modulated
//! per channel by an affine map of the latent code.

use ndarray::{Array1, Array2, Array3, Array4, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_channel_bias, channel_sums, global_avg_pool, global_avg_pool_backward, modulate,
    modulate_backward, silu, silu_backward, upsample2, upsample2_backward, Conv2d, ConvCache,
    Grads, Linear, ParamStore,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub f_dim: usize,
    pub encoder_width: usize,
    pub denoiser_width: usize,
    pub time_dim: usize,
    /// Number of diffusion steps the denoiser accepts.
    pub steps: usize,
}

impl NetConfig {
    /// 32x32 RGB patches with a 64-dimensional latent.
    pub fn desk() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            f_dim: 64,
            encoder_width: 16,
            denoiser_width: 8,
            time_dim: 32,
            steps: 1000,
        }
    }

    /// 256x256 patches with a 512-dimensional latent.
    pub fn full() -> Self {
        Self {
            channels: 3,
            height: 256,
            width: 256,
            f_dim: 512,
            encoder_width: 64,
            denoiser_width: 64,
            time_dim: 128,
            steps: 1000,
        }
    }

    /// A few thousand parameters; used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 3,
            height: 8,
            width: 8,
            f_dim: 8,
            encoder_width: 4,
            denoiser_width: 4,
            time_dim: 8,
            steps: 1000,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("f_dim", self.f_dim),
            ("encoder_width", self.encoder_width),
            ("denoiser_width", self.denoiser_width),
            ("steps", self.steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::config("height", "patch sides must be multiples of 4"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time_dim", "must be an even number >= 2"));
        }
        Ok(())
    }
}

/// Semantic latent vector produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<F = f32>(pub Array1<F>);

impl<F: NdFloat> LatentCode<F> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        self.0.as_slice().unwrap()
    }

    pub fn mean_of(a: &Self, b: &Self) -> Self {
        let half = F::from(0.5).unwrap();
        LatentCode((&a.0 + &b.0).mapv(|v| v * half))
    }
}

/// Sinusoidal embedding of a timestep, half sines and half cosines over
/// geometrically spaced frequencies.
pub fn embed_time(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn time_features<F: NdFloat>(ts: &[usize], dim: usize) -> Array2<F> {
    let mut m = Array2::<F>::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        for (j, v) in embed_time(t, dim).into_iter().enumerate() {
            m[[row, j]] = F::from(v).unwrap();
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Conv2d>,
    proj: Linear,
}

pub struct EncoderCache<F> {
    stages: Vec<(ConvCache<F>, Array4<F>)>,
    pooled: Array2<F>,
    last_hw: (usize, usize),
}

impl Encoder {
    fn new<F: NdFloat>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let w = cfg.encoder_width;
        let widths = [cfg.channels, w, 2 * w, 4 * w, 4 * w];
        let stages = (0..4)
            .map(|i| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("encoder.stage{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                    1,
                )
            })
            .collect();
        let proj = Linear::new(store, rng, "encoder.proj", 4 * w, cfg.f_dim);
        Self { stages, proj }
    }

    pub fn forward<F: NdFloat>(&self, p: &ParamStore<F>, x: &Array4<F>) -> Array2<F> {
        let mut h = x.clone();
        for conv in &self.stages {
            h = silu(&conv.forward(p, &h));
        }
        self.proj.forward(p, &global_avg_pool(&h))
    }

    pub fn forward_train<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        x: &Array4<F>,
    ) -> (Array2<F>, EncoderCache<F>) {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (pre, cache) = conv.forward_train(p, &h);
            h = silu(&pre);
            stages.push((cache, pre));
        }
        let (_, _, hh, ww) = h.dim();
        let pooled = global_avg_pool(&h);
        let z = self.proj.forward(p, &pooled);
        (
            z,
            EncoderCache {
                stages,
                pooled,
                last_hw: (hh, ww),
            },
        )
    }

    pub fn backward<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        cache: &EncoderCache<F>,
        dz: &Array2<F>,
        g: &mut Grads<F>,
    ) {
        let dpooled = self.proj.backward(p, &cache.pooled, dz, g);
        let mut dh = global_avg_pool_backward(&dpooled, cache.last_hw.0, cache.last_hw.1);
        for (conv, (cc, pre)) in self.stages.iter().zip(&cache.stages).rev() {
            let dpre = silu_backward(pre, &dh);
            dh = conv.backward(p, cc, &dpre, g);
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time_proj: Linear,
    latent_proj: Linear,
    ch: usize,
}

struct BlockCache<F> {
    x: Array4<F>,
    c1: ConvCache<F>,
    pre_mod: Array4<F>,
    scale: Array2<F>,
    post_mod: Array4<F>,
    c2: ConvCache<F>,
}

impl ResBlock {
    fn new<F: NdFloat>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        time_width: usize,
        f_dim: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
            time_proj: Linear::new(store, rng, &format!("{name}.time_proj"), time_width, ch),
            latent_proj: Linear::new(store, rng, &format!("{name}.latent_proj"), f_dim, 2 * ch),
            ch,
        }
    }

    fn split<F: NdFloat>(&self, ss: &Array2<F>) -> (Array2<F>, Array2<F>) {
        (
            ss.slice(ndarray::s![.., ..self.ch]).to_owned(),
            ss.slice(ndarray::s![.., self.ch..]).to_owned(),
        )
    }

    fn forward<F: NdFloat>(&self, p: &ParamStore<F>, x: &Array4<F>, temb: &Array2<F>, z: &Array2<F>) -> Array4<F> {
        let mut h = self.conv1.forward(p, &silu(x));
        add_channel_bias(&mut h, &self.time_proj.forward(p, temb));
        let (scale, shift) = self.split(&self.latent_proj.forward(p, z));
        let h = modulate(&h, &scale, &shift);
        x + &self.conv2.forward(p, &silu(&h))
    }

    fn forward_train<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        x: &Array4<F>,
        temb: &Array2<F>,
        z: &Array2<F>,
    ) -> (Array4<F>, BlockCache<F>) {
        let (mut pre_mod, c1) = self.conv1.forward_train(p, &silu(x));
        add_channel_bias(&mut pre_mod, &self.time_proj.forward(p, temb));
        let (scale, shift) = self.split(&self.latent_proj.forward(p, z));
        let post_mod = modulate(&pre_mod, &scale, &shift);
        let (h2, c2) = self.conv2.forward_train(p, &silu(&post_mod));
        (
            x + &h2,
            BlockCache {
                x: x.clone(),
                c1,
                pre_mod,
                scale,
                post_mod,
                c2,
            },
        )
    }

    /// Returns `(dx, dtemb, dz)`.
    fn backward<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        c: &BlockCache<F>,
        dout: &Array4<F>,
        temb: &Array2<F>,
        z: &Array2<F>,
        g: &mut Grads<F>,
    ) -> (Array4<F>, Array2<F>, Array2<F>) {
        let da2 = self.conv2.backward(p, &c.c2, dout, g);
        let dpost = silu_backward(&c.post_mod, &da2);
        let (dpre, dscale, dshift) = modulate_backward(&c.pre_mod, &c.scale, &dpost);
        let dss = ndarray::concatenate(Axis(1), &[dscale.view(), dshift.view()]).unwrap();
        let dz = self.latent_proj.backward(p, z, &dss, g);
        let dtemb = self.time_proj.backward(p, temb, &channel_sums(&dpre), g);
        let da1 = self.conv1.backward(p, &c.c1, &dpre, g);
        let dx = dout + &silu_backward(&c.x, &da1);
        (dx, dtemb, dz)
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    time_mlp: Linear,
    conv_in: Conv2d,
    block1: ResBlock,
    down1: Conv2d,
    block2: ResBlock,
    down2: Conv2d,
    mid: ResBlock,
    up2: Conv2d,
    block3: ResBlock,
    up1: Conv2d,
    block4: ResBlock,
    conv_out: Conv2d,
    time_dim: usize,
}

pub struct DenoiserCache<F> {
    tfeat: Array2<F>,
    temb_pre: Array2<F>,
    temb: Array2<F>,
    c_in: ConvCache<F>,
    b1: BlockCache<F>,
    d1: ConvCache<F>,
    b2: BlockCache<F>,
    d2: ConvCache<F>,
    bm: BlockCache<F>,
    u2: ConvCache<F>,
    b3: BlockCache<F>,
    u1: ConvCache<F>,
    b4: BlockCache<F>,
    out_pre: Array4<F>,
    c_out: ConvCache<F>,
}

impl Denoiser {
    fn new<F: NdFloat>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let w = cfg.denoiser_width;
        let te = cfg.time_dim;
        let f = cfg.f_dim;
        let c = cfg.channels;
        Self {
            time_mlp: Linear::new(store, rng, "denoiser.time_mlp", te, te),
            conv_in: Conv2d::new(store, rng, "denoiser.conv_in", c, w, 3, 1, 1),
            block1: ResBlock::new(store, rng, "denoiser.block1", w, te, f),
            down1: Conv2d::new(store, rng, "denoiser.down1", w, 2 * w, 3, 2, 1),
            block2: ResBlock::new(store, rng, "denoiser.block2", 2 * w, te, f),
            down2: Conv2d::new(store, rng, "denoiser.down2", 2 * w, 4 * w, 3, 2, 1),
            mid: ResBlock::new(store, rng, "denoiser.mid", 4 * w, te, f),
            up2: Conv2d::new(store, rng, "denoiser.up2", 4 * w, 2 * w, 3, 1, 1),
            block3: ResBlock::new(store, rng, "denoiser.block3", 2 * w, te, f),
            up1: Conv2d::new(store, rng, "denoiser.up1", 2 * w, w, 3, 1, 1),
            block4: ResBlock::new(store, rng, "denoiser.block4", w, te, f),
            conv_out: Conv2d::new(store, rng, "denoiser.conv_out", w, c, 3, 1, 1),
            time_dim: te,
        }
    }

    pub fn forward<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        x_t: &Array4<F>,
        ts: &[usize],
        z: &Array2<F>,
    ) -> Array4<F> {
        let temb = silu(&self.time_mlp.forward(p, &time_features(ts, self.time_dim)));
        let h0 = self.conv_in.forward(p, x_t);
        let s1 = self.block1.forward(p, &h0, &temb, z);
        let h = self.down1.forward(p, &s1);
        let s2 = self.block2.forward(p, &h, &temb, z);
        let h = self.down2.forward(p, &s2);
        let h = self.mid.forward(p, &h, &temb, z);
        let h = self.up2.forward(p, &upsample2(&h)) + &s2;
        let h = self.block3.forward(p, &h, &temb, z);
        let h = self.up1.forward(p, &upsample2(&h)) + &s1;
        let h = self.block4.forward(p, &h, &temb, z);
        self.conv_out.forward(p, &silu(&h))
    }

    pub fn forward_train<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        x_t: &Array4<F>,
        ts: &[usize],
        z: &Array2<F>,
    ) -> (Array4<F>, DenoiserCache<F>) {
        let tfeat = time_features(ts, self.time_dim);
        let temb_pre = self.time_mlp.forward(p, &tfeat);
        let temb = silu(&temb_pre);
        let (h0, c_in) = self.conv_in.forward_train(p, x_t);
        let (s1, b1) = self.block1.forward_train(p, &h0, &temb, z);
        let (h, d1) = self.down1.forward_train(p, &s1);
        let (s2, b2) = self.block2.forward_train(p, &h, &temb, z);
        let (h, d2) = self.down2.forward_train(p, &s2);
        let (h, bm) = self.mid.forward_train(p, &h, &temb, z);
        let (h, u2) = self.up2.forward_train(p, &upsample2(&h));
        let (h, b3) = self.block3.forward_train(p, &(h + &s2), &temb, z);
        let (h, u1) = self.up1.forward_train(p, &upsample2(&h));
        let (out_pre, b4) = self.block4.forward_train(p, &(h + &s1), &temb, z);
        let (out, c_out) = self.conv_out.forward_train(p, &silu(&out_pre));
        (
            out,
            DenoiserCache {
                tfeat,
                temb_pre,
                temb,
                c_in,
                b1,
                d1,
                b2,
                d2,
                bm,
                u2,
                b3,
                u1,
                b4,
                out_pre,
                c_out,
            },
        )
    }

    /// Accumulates parameter gradients and returns the gradient with respect to `z`.
    pub fn backward<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        c: &DenoiserCache<F>,
        dout: &Array4<F>,
        z: &Array2<F>,
        g: &mut Grads<F>,
    ) -> Array2<F> {
        let temb = &c.temb;
        let mut dtemb = Array2::<F>::zeros(temb.raw_dim());
        let mut dz = Array2::<F>::zeros(z.raw_dim());
        let mut acc = |dt: Array2<F>, dzz: Array2<F>| {
            dtemb += &dt;
            dz += &dzz;
        };

        let d = self.conv_out.backward(p, &c.c_out, dout, g);
        let d = silu_backward(&c.out_pre, &d);
        let (d, dt, dzz) = self.block4.backward(p, &c.b4, &d, temb, z, g);
        acc(dt, dzz);
        let ds1_skip = d.clone();
        let d = upsample2_backward(&self.up1.backward(p, &c.u1, &d, g));
        let (d, dt, dzz) = self.block3.backward(p, &c.b3, &d, temb, z, g);
        acc(dt, dzz);
        let ds2_skip = d.clone();
        let d = upsample2_backward(&self.up2.backward(p, &c.u2, &d, g));
        let (d, dt, dzz) = self.mid.backward(p, &c.bm, &d, temb, z, g);
        acc(dt, dzz);
        let d = self.down2.backward(p, &c.d2, &d, g) + &ds2_skip;
        let (d, dt, dzz) = self.block2.backward(p, &c.b2, &d, temb, z, g);
        acc(dt, dzz);
        let d = self.down1.backward(p, &c.d1, &d, g) + &ds1_skip;
        let (d, dt, dzz) = self.block1.backward(p, &c.b1, &d, temb, z, g);
        acc(dt, dzz);
        self.conv_in.backward(p, &c.c_in, &d, g);

        let dpre = silu_backward(&c.temb_pre, &dtemb);
        self.time_mlp.backward(p, &c.tfeat, &dpre, g);
        dz
    }
}

/// Encoder, denoiser and position heads sharing one parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle<F = f32> {
    pub config: NetConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub radial_head: Linear,
    pub angular_head: Linear,
}

impl<F: NdFloat> ModelBundle<F> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let denoiser = Denoiser::new(&mut params, &mut rng, &config);
        let radial_head = Linear::new(&mut params, &mut rng, "heads.radial", config.f_dim, 1);
        let angular_head = Linear::new(&mut params, &mut rng, "heads.angular", config.f_dim, 1);
        Ok(Self {
            config,
            params,
            encoder,
            denoiser,
            radial_head,
            angular_head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same architecture with parameters converted to another float type.
    pub fn cast<G: NdFloat>(&self) -> ModelBundle<G> {
        ModelBundle {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            denoiser: self.denoiser.clone(),
            radial_head: self.radial_head.clone(),
            angular_head: self.angular_head.clone(),
        }
    }

    fn check_batch(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if [c, h, w] != self.config.image_shape() {
            return Err(Error::shape(&self.config.image_shape(), &[c, h, w]));
        }
        Ok(())
    }

    fn check_image(&self, x: &Array3<F>) -> Result<()> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::shape(&self.config.image_shape(), x.shape()));
        }
        Ok(())
    }

    fn check_latents(&self, z: &Array2<F>, n: usize) -> Result<()> {
        if z.dim() != (n, self.config.f_dim) {
            return Err(Error::shape(&[n, self.config.f_dim], z.shape()));
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_batch(x)?;
        Ok(self.encoder.forward(&self.params, x))
    }

    /// Latent code of one image in model range.
    pub fn encode(&self, x0: &Array3<F>) -> Result<LatentCode<F>> {
        self.check_image(x0)?;
        let z = self.encoder.forward(&self.params, &x0.clone().insert_axis(Axis(0)));
        Ok(LatentCode(z.index_axis_move(Axis(0), 0)))
    }

    pub fn denoise_batch(&self, x_t: &Array4<F>, ts: &[usize], z: &Array2<F>) -> Result<Array4<F>> {
        self.check_batch(x_t)?;
        self.check_latents(z, x_t.dim().0)?;
        if ts.len() != x_t.dim().0 {
            return Err(Error::shape(&[x_t.dim().0], &[ts.len()]));
        }
        for &t in ts {
            if t == 0 || t > self.config.steps {
                return Err(Error::TimestepOutOfRange {
                    t,
                    min: 1,
                    max: self.config.steps,
                });
            }
        }
        Ok(self.denoiser.forward(&self.params, x_t, ts, z))
    }

    /// Predicted clean image for one noisy image.
    pub fn denoise(&self, x_t: &Array3<F>, t: usize, z: &LatentCode<F>) -> Result<Array3<F>> {
        self.check_image(x_t)?;
        if z.len() != self.config.f_dim {
            return Err(Error::shape(&[self.config.f_dim], &[z.len()]));
        }
        let zb = z.0.clone().insert_axis(Axis(0));
        let out = self.denoise_batch(&x_t.clone().insert_axis(Axis(0)), &[t], &zb)?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Radial and angular head outputs for a batch of latents, shape `(n, 2)`.
    pub fn regress_batch(&self, z: &Array2<F>) -> Result<Array2<F>> {
        self.check_latents(z, z.dim().0)?;
        let r = self.radial_head.forward(&self.params, z);
        let a = self.angular_head.forward(&self.params, z);
        Ok(ndarray::concatenate(Axis(1), &[r.view(), a.view()]).unwrap())
    }

    pub fn regress_position(&self, z: &LatentCode<F>) -> Result<(F, F)> {
        let out = self.regress_batch(&z.0.clone().insert_axis(Axis(0)))?;
        Ok((out[[0, 0]], out[[0, 1]]))
    }

    pub fn embed_time(&self, t: usize) -> Vec<f64> {
        embed_time(t, self.config.time_dim)
    }
}

pub mod checkpoint {
    //! Single-file checkpoints: safetensors payload keyed by hierarchical
    //! parameter names, with a JSON manifest in the header metadata.

    use std::collections::HashMap;
    use std::path::Path;

    use ndarray::{ArrayD, IxDyn};
    use safetensors::tensor::{Dtype, TensorView};
    use safetensors::SafeTensors;
    use serde::{Deserialize, Serialize};

    use super::{ModelBundle, NetConfig};
    use crate::error::{Error, Result};

    const MANIFEST_KEY: &str = "posdiffae.manifest";

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Manifest {
        pub net: NetConfig,
        pub beta_start: f64,
        pub beta_end: f64,
        pub lambdas: [f64; 3],
        pub num_params: usize,
    }

    pub fn to_bytes(bundle: &ModelBundle<f32>, manifest: &Manifest) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = bundle
            .params
            .iter()
            .map(|(name, t)| {
                let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.to_string(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelBundle<f32>, Manifest)> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let manifest: Manifest = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::Checkpoint("manifest missing".into()))
            .and_then(|s| Ok(serde_json::from_str(s)?))?;
        let tensors =
            SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut bundle = ModelBundle::<f32>::new(manifest.net.clone(), 0)?;
        let ids: Vec<_> = bundle.params.ids().collect();
        for id in ids {
            let name = bundle.params.name(id).to_string();
            let view = tensors
                .tensor(&name)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected F32")));
            }
            let target = bundle.params.get_mut(id);
            if view.shape() != target.shape() {
                return Err(Error::shape(target.shape(), view.shape()));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *target = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if tensors.len() != bundle.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                bundle.params.len(),
                tensors.len()
            )));
        }
        Ok((bundle, manifest))
    }

    pub fn save(bundle: &ModelBundle<f32>, manifest: &Manifest, path: &Path) -> Result<()> {
        std::fs::write(path, to_bytes(bundle, manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelBundle<f32>, Manifest)> {
        from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn random_batch(cfg: &NetConfig, n: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((n, cfg.channels, cfg.height, cfg.width), || {
            rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn encode_is_deterministic_with_configured_length() {
        let b = ModelBundle::<f32>::new(NetConfig::desk(), 1).unwrap();
        let x = random_batch(&b.config, 1, 2).index_axis_move(Axis(0), 0);
        let z1 = b.encode(&x).unwrap();
        let z2 = b.encode(&x).unwrap();
        assert_eq!(z1.len(), 64);
        assert_eq!(
            z1.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            z2.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(z1.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn full_scale_config_is_constructible() {
        let cfg = NetConfig::full();
        assert_eq!(cfg.f_dim, 512);
        assert_eq!(cfg.image_shape(), [3, 256, 256]);
        let b = ModelBundle::<f32>::new(cfg, 0).unwrap();
        assert_eq!(b.radial_head.in_dim, 512);
    }

    #[test]
    fn denoise_preserves_shape_and_is_bit_stable() {
        let b = ModelBundle::<f32>::new(NetConfig::desk(), 3).unwrap();
        let x = random_batch(&b.config, 1, 4).index_axis_move(Axis(0), 0);
        let z = b.encode(&x).unwrap();
        let y1 = b.denoise(&x, 500, &z).unwrap();
        let y2 = b.denoise(&x, 500, &z).unwrap();
        assert_eq!(y1.shape(), x.shape());
        assert_eq!(
            y1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn batch_and_single_paths_agree() {
        let b = ModelBundle::<f64>::new(NetConfig::tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Array4<f64> = Array::from_shape_simple_fn((3, 3, 8, 8), || rng.random_range(-1.0..1.0));
        let z = b.encode_batch(&x).unwrap();
        let y = b.denoise_batch(&x, &[5, 50, 500], &z).unwrap();
        for i in 0..3 {
            let xi = x.index_axis(Axis(0), i).to_owned();
            let zi = b.encode(&xi).unwrap();
            let yi = b.denoise(&xi, [5, 50, 500][i], &zi).unwrap();
            let diff = (&yi - &y.index_axis(Axis(0), i)).mapv(f64::abs).sum();
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn denoise_rejects_bad_inputs() {
        let b = ModelBundle::<f32>::new(NetConfig::tiny(), 3).unwrap();
        let x = Array3::<f32>::zeros((3, 8, 8));
        let z = LatentCode(Array1::zeros(8));
        assert!(b.denoise(&x, 0, &z).is_err());
        assert!(b.denoise(&x, 1001, &z).is_err());
        assert!(b.denoise(&Array3::zeros((3, 8, 4)), 1, &z).is_err());
        assert!(b.denoise(&x, 1, &LatentCode(Array1::zeros(7))).is_err());
        assert!(b.encode(&Array3::zeros((1, 8, 8))).is_err());
    }

    #[test]
    fn zero_latent_through_zeroed_heads() {
        let mut b = ModelBundle::<f32>::new(NetConfig::desk(), 5).unwrap();
        for head in [b.radial_head.clone(), b.angular_head.clone()] {
            b.params.get_mut(head.weight).fill(0.0);
            b.params.get_mut(head.bias).fill(0.0);
        }
        let (r, a) = b.regress_position(&LatentCode(Array1::zeros(64))).unwrap();
        assert_eq!((r, a), (0.0, 0.0));
        let untouched = ModelBundle::<f32>::new(NetConfig::desk(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentCode(Array1::from_shape_simple_fn(64, || rng.random_range(-3.0..3.0)));
        let (r, a) = untouched.regress_position(&z).unwrap();
        assert!(r.is_finite() && a.is_finite());
    }

    #[test]
    fn time_embedding_is_injective_over_schedule() {
        assert_ne!(embed_time(1, 32), embed_time(2, 32));
        assert_eq!(embed_time(7, 32), embed_time(7, 32));
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| embed_time(t, 32)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn parameter_counts_are_stable() {
        assert_eq!(ModelBundle::<f32>::new(NetConfig::desk(), 0).unwrap().num_params(), DESK_PARAMS);
        assert_eq!(ModelBundle::<f32>::new(NetConfig::desk(), 99).unwrap().num_params(), DESK_PARAMS);
        assert!(ModelBundle::<f64>::new(NetConfig::tiny(), 0).unwrap().num_params() <= 50_000);
    }

    const DESK_PARAMS: usize = 121_045;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let b = ModelBundle::<f32>::new(NetConfig::tiny(), 12).unwrap();
        let manifest = checkpoint::Manifest {
            net: b.config.clone(),
            beta_start: 1e-4,
            beta_end: 0.02,
            lambdas: [1.0, 0.001, 0.001],
            num_params: b.num_params(),
        };
        let bytes = checkpoint::to_bytes(&b, &manifest).unwrap();
        let (loaded, m2) = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(m2, manifest);
        for ((n1, t1), (n2, t2)) in b.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(
                t1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(checkpoint::to_bytes(&loaded, &m2).unwrap(), bytes);
        assert!(checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }
}
