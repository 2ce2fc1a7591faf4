//! Generator and discriminator networks.
//!
//! The generator is an encoder-decoder over residual blocks. The encoder
//! halves spatial extent `encoder_depth` times with channel plan m, m, 2m,
//! 4m, 8m, 8m, ... and flattens the deepest map into a `bottleneck_dim`
//! vector. The decoder mirrors it with inverted residual blocks back up to
//! the attention site (`image_size/4`), where the tap from the second
//! encoder block (`f_enc`) meets the decoder features (`f_dec`):
//!
//! `f_fused = f_enc * attn_enc + f_dec * attn_dec`
//!
//! Both attention maps come from a four-conv module over the
//! channel-concatenated pair. Two more inverted blocks and a tanh head emit
//! the reconstruction. Step-1 training bypasses the attention module
//! entirely (`f_fused = f_dec`). The discriminator is a DCGAN-style strided
//! conv stack reduced to one sigmoid probability per image.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageTensor, RangeTag};
use crate::nn::{
    bn_backward_opt, bn_forward_eval_opt, bn_forward_train_opt, leaky_relu, leaky_relu_backward,
    materialize, relu, relu_backward, sigmoid, sigmoid_backward, tanh_backward, tanh_forward,
    BatchNorm2d, BnCache, Conv2d, Conv2dCache, DownBlock, DownBlockCache, Elem, GradStore, Linear,
    LinearCache, ParamGroup, ParamSpec, ParamStore, UpBlock, UpBlockCache,
};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Negative slope of the discriminator's LeakyReLU units.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("base_filters must be at least 1")]
    ZeroFilters,
    #[error("bottleneck_dim must be at least 1")]
    ZeroBottleneck,
    #[error("encoder_depth {0} is below the minimum of 2")]
    DepthTooSmall(usize),
    #[error("image_size {0} must be a power of two, at least 16")]
    BadImageSize(usize),
    #[error("encoder_depth {depth} leaves a {deep}x{deep} deepest map; 4x4 is the minimum")]
    DeepMapTooSmall { depth: usize, deep: usize },
    #[error("attention_site_size {site} must equal image_size/4 = {expect}")]
    SiteMismatch { site: usize, expect: usize },
    #[error("the mask input channel variant is reserved and not implemented")]
    MaskChannelReserved,
    #[error("expected input shape {want:?}, got {got:?}")]
    ShapeMismatch { want: Vec<usize>, got: Vec<usize> },
    #[error("expected a signed-range image")]
    NotSigned,
    #[error("bottleneck length {got} does not match configured {want}")]
    BottleneckLength { want: usize, got: usize },
    #[error("{site} forward pass produced non-finite values")]
    NonFinite { site: &'static str },
}

/// Generator and discriminator topology settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub base_filters: usize,
    pub bottleneck_dim: usize,
    /// Number of stride-2 encoder blocks.
    pub encoder_depth: usize,
    /// Spatial size where encoder tap and decoder features fuse; tied to
    /// `image_size / 4`.
    pub attention_site_size: usize,
    /// Batch normalization inside residual blocks and the discriminator.
    /// Turned off for finite-difference gradient checks.
    pub batch_norm: bool,
    /// Reserved: feed the occlusion mask as a fourth input channel.
    pub mask_input_channel: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            base_filters: 64,
            bottleneck_dim: 99,
            encoder_depth: 6,
            attention_site_size: 64,
            batch_norm: true,
            mask_input_channel: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.base_filters == 0 {
            return Err(NetworkError::ZeroFilters);
        }
        if self.bottleneck_dim == 0 {
            return Err(NetworkError::ZeroBottleneck);
        }
        if self.encoder_depth < 2 {
            return Err(NetworkError::DepthTooSmall(self.encoder_depth));
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(NetworkError::BadImageSize(self.image_size));
        }
        let deep = self.image_size >> self.encoder_depth;
        if deep < 4 {
            return Err(NetworkError::DeepMapTooSmall { depth: self.encoder_depth, deep });
        }
        if self.attention_site_size * 4 != self.image_size {
            return Err(NetworkError::SiteMismatch {
                site: self.attention_site_size,
                expect: self.image_size / 4,
            });
        }
        if self.mask_input_channel {
            return Err(NetworkError::MaskChannelReserved);
        }
        Ok(())
    }

    /// Output channels of encoder block `i`: m, m, 2m, 4m, 8m, 8m, ...
    pub fn enc_channels(&self, block: usize) -> usize {
        if block <= 1 {
            self.base_filters
        } else {
            self.base_filters * (1usize << (block - 1)).min(8)
        }
    }

    /// Spatial size of the deepest encoder map.
    pub fn deepest_size(&self) -> usize {
        self.image_size >> self.encoder_depth
    }

    /// Flattened length of the deepest encoder map.
    pub fn flat_len(&self) -> usize {
        let deep = self.deepest_size();
        self.enc_channels(self.encoder_depth - 1) * deep * deep
    }

    /// Number of stride-2 discriminator layers down to the 4x4 map.
    pub fn disc_layers(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }
}

/// Which network site a [`FeatureMap`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteTag {
    EncoderTap,
    DecoderSite,
    Fused,
    AttnEnc,
    AttnDec,
}

/// Single-image feature tensor `(channels, h, w)` with provenance.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f32>,
    pub site_tag: SiteTag,
}

/// The two maps split from the attention module output.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub attn_enc: FeatureMap,
    pub attn_dec: FeatureMap,
}

/// Step-1 `Bypass` skips the attention module and decodes `f_dec` directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Bypass,
    Attention,
}

/// Elementwise fusion `f_enc * attn_enc + f_dec * attn_dec`.
pub fn fuse_maps<E: Elem>(
    f_enc: &Array4<E>,
    f_dec: &Array4<E>,
    attn_enc: &Array4<E>,
    attn_dec: &Array4<E>,
) -> Array4<E> {
    assert_eq!(f_enc.dim(), f_dec.dim(), "fuse: feature shapes");
    assert_eq!(f_enc.dim(), attn_enc.dim(), "fuse: attn_enc shape");
    assert_eq!(f_enc.dim(), attn_dec.dim(), "fuse: attn_dec shape");
    let mut fused = Array4::zeros(f_enc.raw_dim());
    Zip::from(&mut fused)
        .and(f_enc)
        .and(attn_enc)
        .and(f_dec)
        .and(attn_dec)
        .for_each(|o, &fe, &ae, &fd, &ad| *o = fe * ae + fd * ad);
    fused
}

#[derive(Debug)]
struct AttnCache<E> {
    convs: Vec<Conv2dCache<E>>,
}

#[derive(Debug)]
struct FuseCache<E> {
    f_enc: Array4<E>,
    f_dec: Array4<E>,
    attn_enc: Array4<E>,
    attn_dec: Array4<E>,
}

/// Everything the generator backward pass needs from one training forward.
#[derive(Debug)]
pub struct GenCache<E> {
    mode: ForwardMode,
    enc: Vec<DownBlockCache<E>>,
    enc_fc: LinearCache<E>,
    dec_fc: LinearCache<E>,
    site: Vec<UpBlockCache<E>>,
    attn: Option<(AttnCache<E>, FuseCache<E>)>,
    post: Vec<UpBlockCache<E>>,
    head: Conv2dCache<E>,
    y: Array4<E>,
}

impl<E> GenCache<E> {
    pub fn output(&self) -> &Array4<E> {
        &self.y
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }
}

/// Everything the discriminator backward pass needs from one forward.
#[derive(Debug)]
pub struct DiscCache<E> {
    layers: Vec<(Conv2dCache<E>, Option<BnCache<E>>)>,
    last: Conv2dCache<E>,
    p: Array1<E>,
    clamped: Vec<bool>,
}

impl<E> DiscCache<E> {
    pub fn probs(&self) -> &Array1<E> {
        &self.p
    }
}

fn clamp_probs<E: Elem>(p: &mut Array1<E>) -> Vec<bool> {
    let lo = E::from_f64(PROB_EPS);
    let hi = E::from_f64(1.0 - PROB_EPS);
    let mut clamped = vec![false; p.len()];
    for (i, v) in p.iter_mut().enumerate() {
        if *v < lo {
            *v = lo;
            clamped[i] = true;
        } else if *v > hi {
            *v = hi;
            clamped[i] = true;
        }
    }
    clamped
}

/// Channel concatenation into a fresh standard-layout array.
fn cat_channels<E: Elem>(a: &Array4<E>, b: &Array4<E>) -> Array4<E> {
    let (n, ca, h, w) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    assert_eq!((n, h, w), (nb, hb, wb), "cat: batch/spatial shapes");
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

fn ensure_finite<'a, E: Elem, I: IntoIterator<Item = &'a E>>(
    vals: I,
    site: &'static str,
) -> Result<(), NetworkError> {
    for v in vals {
        if !Elem::to_f64(*v).is_finite() {
            return Err(NetworkError::NonFinite { site });
        }
    }
    Ok(())
}

/// Layer topology for one [`NetworkConfig`]; parameters live in a
/// [`ParamStore`] keyed by the names this model assigns.
#[derive(Debug)]
pub struct Model {
    cfg: NetworkConfig,
    enc: Vec<DownBlock>,
    enc_fc: Linear,
    dec_fc: Linear,
    site: Vec<UpBlock>,
    attn: Vec<Conv2d>,
    post: Vec<UpBlock>,
    head: Conv2d,
    disc: Vec<(Conv2d, Option<BatchNorm2d>)>,
    disc_final: Conv2d,
    deep_c: usize,
    flat_len: usize,
}

impl Model {
    pub fn new(cfg: NetworkConfig) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let m = cfg.base_filters;
        let d = cfg.encoder_depth;
        let norm = cfg.batch_norm;

        let mut enc = Vec::with_capacity(d);
        let mut in_c = 3;
        for i in 0..d {
            let out_c = cfg.enc_channels(i);
            enc.push(DownBlock::new(&format!("enc.block{i}"), ParamGroup::Encoder, in_c, out_c, norm));
            in_c = out_c;
        }

        let deep_c = cfg.enc_channels(d - 1);
        let flat_len = cfg.flat_len();
        let enc_fc = Linear::new("enc.fc", ParamGroup::Encoder, flat_len, cfg.bottleneck_dim);
        let dec_fc = Linear::new("dec.fc", ParamGroup::Decoder, cfg.bottleneck_dim, flat_len);

        let mut site = Vec::with_capacity(d - 2);
        for j in 0..d - 2 {
            let ic = cfg.enc_channels(d - 1 - j);
            let oc = cfg.enc_channels(d - 2 - j);
            site.push(UpBlock::new(&format!("dec.site{j}"), ParamGroup::Decoder, ic, oc, norm));
        }

        let widths = [2 * m, 4 * m, 4 * m, 8 * m, 2 * m];
        let mut attn = Vec::with_capacity(4);
        for i in 0..4 {
            attn.push(Conv2d::new(
                format!("attn.conv{i}"),
                ParamGroup::Attention,
                widths[i],
                widths[i + 1],
                3,
                1,
                1,
            ));
        }

        let post = vec![
            UpBlock::new("dec.post0", ParamGroup::Decoder, m, m, norm),
            UpBlock::new("dec.post1", ParamGroup::Decoder, m, m, norm),
        ];
        let head = Conv2d::new("dec.head", ParamGroup::Decoder, m, 3, 3, 1, 1);

        let l = cfg.disc_layers();
        let mut disc = Vec::with_capacity(l);
        let mut ic = 3;
        for i in 0..l {
            let oc = m << i;
            let conv = Conv2d::new(format!("disc.conv{i}"), ParamGroup::Discriminator, ic, oc, 4, 2, 1);
            let bn = (i > 0 && norm)
                .then(|| BatchNorm2d::new(format!("disc.bn{i}"), ParamGroup::Discriminator, oc));
            disc.push((conv, bn));
            ic = oc;
        }
        let disc_final = Conv2d::new("disc.final", ParamGroup::Discriminator, ic, 1, 4, 1, 0);

        Ok(Self { cfg, enc, enc_fc, dec_fc, site, attn, post, head, disc, disc_final, deep_c, flat_len })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for b in &self.enc {
            specs.extend(b.param_specs());
        }
        specs.extend(self.enc_fc.param_specs());
        specs.extend(self.dec_fc.param_specs());
        for b in &self.site {
            specs.extend(b.param_specs());
        }
        for c in &self.attn {
            specs.extend(c.param_specs());
        }
        for b in &self.post {
            specs.extend(b.param_specs());
        }
        specs.extend(self.head.param_specs());
        for (c, bn) in &self.disc {
            specs.extend(c.param_specs());
            if let Some(b) = bn {
                specs.extend(b.param_specs());
            }
        }
        specs.extend(self.disc_final.param_specs());
        specs
    }

    pub fn init_params<E: Elem>(&self, seed: u64) -> ParamStore<E> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        materialize(&self.param_specs(), &mut rng)
    }

    fn check_image_batch<E: Elem>(&self, x: &Array4<E>) -> Result<(), NetworkError> {
        let (_, c, h, w) = x.dim();
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(NetworkError::ShapeMismatch { want: vec![3, s, s], got: vec![c, h, w] });
        }
        Ok(())
    }

    /// Runs the attention convs on `[f_enc; f_dec]` and splits the output.
    fn attention_apply<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        f_enc: &Array4<E>,
        f_dec: &Array4<E>,
    ) -> (Array4<E>, Array4<E>, AttnCache<E>) {
        let mut h = cat_channels(f_enc, f_dec);
        let mut convs = Vec::with_capacity(self.attn.len());
        for (i, conv) in self.attn.iter().enumerate() {
            let (mut y, c) = conv.forward(ps, h);
            if i + 1 < self.attn.len() {
                relu(&mut y);
            }
            h = y;
            convs.push(c);
        }
        let m = self.cfg.base_filters;
        let attn_enc = h.slice(s![.., ..m, .., ..]).to_owned();
        let attn_dec = h.slice(s![.., m.., .., ..]).to_owned();
        (attn_enc, attn_dec, AttnCache { convs })
    }

    /// Training forward; updates batch-norm running stats and returns the
    /// reconstruction together with the cache for [`Model::generator_backward`].
    pub fn generator_train<E: Elem>(
        &self,
        ps: &mut ParamStore<E>,
        x: Array4<E>,
        mode: ForwardMode,
    ) -> Result<(Array4<E>, GenCache<E>), NetworkError> {
        self.check_image_batch(&x)?;
        let n = x.dim().0;

        let mut h = x;
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut f_enc = None;
        for (i, blk) in self.enc.iter().enumerate() {
            let (y, c) = blk.forward_train(ps, h);
            if i == 1 && mode == ForwardMode::Attention {
                f_enc = Some(y.clone());
            }
            h = y;
            enc_caches.push(c);
        }
        let flat = h.into_shape_with_order((n, self.flat_len)).expect("contiguous");
        let (z, enc_fc_c) = self.enc_fc.forward(ps, flat);
        let (dflat, dec_fc_c) = self.dec_fc.forward(ps, z);
        let deep = self.cfg.deepest_size();
        let mut f = dflat.into_shape_with_order((n, self.deep_c, deep, deep)).expect("contiguous");
        let mut site_caches = Vec::with_capacity(self.site.len());
        for blk in &self.site {
            let (y, c) = blk.forward_train(ps, f);
            f = y;
            site_caches.push(c);
        }

        let (mut fused, attn) = match mode {
            ForwardMode::Bypass => (f, None),
            ForwardMode::Attention => {
                let f_enc = f_enc.expect("tap recorded");
                let f_dec = f;
                let (ae, ad, ac) = self.attention_apply(ps, &f_enc, &f_dec);
                let fused = fuse_maps(&f_enc, &f_dec, &ae, &ad);
                let fc = FuseCache { f_enc, f_dec, attn_enc: ae, attn_dec: ad };
                (fused, Some((ac, fc)))
            }
        };

        let mut post_caches = Vec::with_capacity(self.post.len());
        for blk in &self.post {
            let (y, c) = blk.forward_train(ps, fused);
            fused = y;
            post_caches.push(c);
        }
        let (pre, head_c) = self.head.forward(ps, fused);
        let y = tanh_forward(pre);
        let cache = GenCache {
            mode,
            enc: enc_caches,
            enc_fc: enc_fc_c,
            dec_fc: dec_fc_c,
            site: site_caches,
            attn,
            post: post_caches,
            head: head_c,
            y: y.clone(),
        };
        Ok((y, cache))
    }

    /// Backpropagates `dy` (gradient on the reconstruction) through the
    /// whole generator, accumulating parameter gradients and returning the
    /// gradient on the input image.
    pub fn generator_backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: GenCache<E>,
        dy: Array4<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let GenCache { mode, enc, enc_fc, dec_fc, site, attn, post, head, y } = cache;

        let mut d = dy;
        tanh_backward(&mut d, &y);
        let mut d = self.head.backward(ps, &head, &d, grads);
        for (blk, c) in self.post.iter().zip(post).rev() {
            d = blk.backward(ps, c, &d, grads);
        }

        // d is now the gradient on the fused site features.
        let (mut dsite, dtap) = match (mode, attn) {
            (ForwardMode::Bypass, _) => (d, None),
            (ForwardMode::Attention, Some((ac, fc))) => {
                let datt_enc = &d * &fc.f_enc;
                let datt_dec = &d * &fc.f_dec;
                let mut dfenc = &d * &fc.attn_enc;
                let mut dfdec = &d * &fc.attn_dec;
                let mut g = cat_channels(&datt_enc, &datt_dec);
                for i in (0..self.attn.len()).rev() {
                    g = self.attn[i].backward(ps, &ac.convs[i], &g, grads);
                    if i > 0 {
                        relu_backward(&mut g, &ac.convs[i].x);
                    }
                }
                let m = self.cfg.base_filters;
                dfenc += &g.slice(s![.., ..m, .., ..]);
                dfdec += &g.slice(s![.., m.., .., ..]);
                (dfdec, Some(dfenc))
            }
            (ForwardMode::Attention, None) => unreachable!("attention cache present"),
        };

        for (blk, c) in self.site.iter().zip(site).rev() {
            dsite = blk.backward(ps, c, &dsite, grads);
        }
        let n = dsite.dim().0;
        let dflat = dsite.into_shape_with_order((n, self.flat_len)).expect("contiguous");
        let dz = self.dec_fc.backward(ps, &dec_fc, &dflat, grads);
        let dflat_enc = self.enc_fc.backward(ps, &enc_fc, &dz, grads);
        let deep = self.cfg.deepest_size();
        let mut d =
            dflat_enc.into_shape_with_order((n, self.deep_c, deep, deep)).expect("contiguous");

        let mut enc = enc;
        while enc.len() > 2 {
            let c = enc.pop().expect("nonempty");
            d = self.enc[enc.len()].backward(ps, c, &d, grads);
        }
        // The encoder tap branches off after block 1; its gradient joins here.
        if let Some(t) = dtap {
            d += &t;
        }
        let c1 = enc.pop().expect("two blocks");
        d = self.enc[1].backward(ps, c1, &d, grads);
        let c0 = enc.pop().expect("two blocks");
        self.enc[0].backward(ps, c0, &d, grads)
    }

    fn encoder_eval<E: Elem>(&self, ps: &ParamStore<E>, x: &Array4<E>) -> (Array2<E>, Array4<E>) {
        let mut h = self.enc[0].forward_eval(ps, x);
        let mut f_enc = None;
        for (i, blk) in self.enc.iter().enumerate().skip(1) {
            h = blk.forward_eval(ps, &h);
            if i == 1 {
                f_enc = Some(h.clone());
            }
        }
        let n = h.dim().0;
        let flat = h.into_shape_with_order((n, self.flat_len)).expect("contiguous");
        let (z, _) = self.enc_fc.forward(ps, flat);
        (z, f_enc.expect("depth of at least 2"))
    }

    fn decoder_site_eval<E: Elem>(&self, ps: &ParamStore<E>, z: Array2<E>) -> Array4<E> {
        let n = z.dim().0;
        let (dflat, _) = self.dec_fc.forward(ps, z);
        let deep = self.cfg.deepest_size();
        let mut f = dflat.into_shape_with_order((n, self.deep_c, deep, deep)).expect("contiguous");
        for blk in &self.site {
            f = blk.forward_eval(ps, &f);
        }
        f
    }

    fn decoder_head_eval<E: Elem>(&self, ps: &ParamStore<E>, mut f: Array4<E>) -> Array4<E> {
        for blk in &self.post {
            f = blk.forward_eval(ps, &f);
        }
        let (pre, _) = self.head.forward(ps, f);
        tanh_forward(pre)
    }

    /// Inference forward using batch-norm running statistics. Returns the
    /// reconstruction and, in attention mode, the `(attn_enc, attn_dec)` pair.
    pub fn generator_eval<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        x: &Array4<E>,
        mode: ForwardMode,
    ) -> Result<(Array4<E>, Option<(Array4<E>, Array4<E>)>), NetworkError> {
        self.check_image_batch(x)?;
        let (z, f_enc) = self.encoder_eval(ps, x);
        let f_dec = self.decoder_site_eval(ps, z);
        match mode {
            ForwardMode::Bypass => Ok((self.decoder_head_eval(ps, f_dec), None)),
            ForwardMode::Attention => {
                let (ae, ad, _) = self.attention_apply(ps, &f_enc, &f_dec);
                let fused = fuse_maps(&f_enc, &f_dec, &ae, &ad);
                Ok((self.decoder_head_eval(ps, fused), Some((ae, ad))))
            }
        }
    }

    /// Training forward of the discriminator; returns clamped probabilities.
    pub fn discriminator_train<E: Elem>(
        &self,
        ps: &mut ParamStore<E>,
        x: Array4<E>,
    ) -> Result<(Array1<E>, DiscCache<E>), NetworkError> {
        self.check_image_batch(&x)?;
        let n = x.dim().0;
        let mut h = x;
        let mut layers = Vec::with_capacity(self.disc.len());
        for (conv, bn) in &self.disc {
            let (a, cc) = conv.forward(ps, h);
            let (mut a, bc) = bn_forward_train_opt(bn, ps, a);
            leaky_relu(&mut a, LEAKY_SLOPE);
            h = a;
            layers.push((cc, bc));
        }
        let (logits, last) = self.disc_final.forward(ps, h);
        let logits = logits.into_shape_with_order(n).expect("one value per image");
        let mut p = sigmoid(logits);
        let clamped = clamp_probs(&mut p);
        let cache = DiscCache { layers, last, p: p.clone(), clamped };
        Ok((p, cache))
    }

    /// Backpropagates `dp` (gradient on the probabilities) through the
    /// discriminator, returning the gradient on the input image.
    pub fn discriminator_backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: &DiscCache<E>,
        dp: &Array1<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let mut d = dp.clone();
        for (v, &c) in d.iter_mut().zip(&cache.clamped) {
            if c {
                *v = E::zero();
            }
        }
        let dlogits = sigmoid_backward(&d, &cache.p);
        let n = dlogits.len();
        let d4 = dlogits.into_shape_with_order((n, 1, 1, 1)).expect("contiguous");
        let mut dh = self.disc_final.backward(ps, &cache.last, &d4, grads);
        for i in (0..self.disc.len()).rev() {
            let out = if i + 1 == self.disc.len() { &cache.last.x } else { &cache.layers[i + 1].0.x };
            leaky_relu_backward(&mut dh, out, LEAKY_SLOPE);
            let db = bn_backward_opt(&self.disc[i].1, &cache.layers[i].1, ps, dh, grads);
            dh = self.disc[i].0.backward(ps, &cache.layers[i].0, &db, grads);
        }
        dh
    }

    /// Inference forward of the discriminator on a batch.
    pub fn discriminator_eval<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        x: &Array4<E>,
    ) -> Result<Array1<E>, NetworkError> {
        self.check_image_batch(x)?;
        let n = x.dim().0;
        let mut h = x.clone();
        for (conv, bn) in &self.disc {
            let (a, _) = conv.forward(ps, h);
            let mut a = bn_forward_eval_opt(bn, ps, a);
            leaky_relu(&mut a, LEAKY_SLOPE);
            h = a;
        }
        let (logits, _) = self.disc_final.forward(ps, h);
        let logits = logits.into_shape_with_order(n).expect("one value per image");
        let mut p = sigmoid(logits);
        clamp_probs(&mut p);
        Ok(p)
    }

    fn image_to_batch(&self, x: &ImageTensor) -> Result<Array4<f32>, NetworkError> {
        if x.range() != RangeTag::Signed {
            return Err(NetworkError::NotSigned);
        }
        let batch = x.data().clone().insert_axis(Axis(0));
        self.check_image_batch(&batch)?;
        Ok(batch)
    }

    /// Encodes one image into the bottleneck vector and the `f_enc` tap.
    pub fn encode(
        &self,
        ps: &ParamStore<f32>,
        x: &ImageTensor,
    ) -> Result<(Array1<f32>, FeatureMap), NetworkError> {
        let xb = self.image_to_batch(x)?;
        let (z, f_enc) = self.encoder_eval(ps, &xb);
        let z = z.index_axis_move(Axis(0), 0);
        ensure_finite(z.iter(), "encoder")?;
        let data = f_enc.index_axis_move(Axis(0), 0);
        ensure_finite(data.iter(), "encoder")?;
        Ok((z, FeatureMap { data, site_tag: SiteTag::EncoderTap }))
    }

    /// Decodes a bottleneck vector up to the attention site.
    pub fn decode_to_site(
        &self,
        ps: &ParamStore<f32>,
        z: &[f32],
    ) -> Result<FeatureMap, NetworkError> {
        if z.len() != self.cfg.bottleneck_dim {
            return Err(NetworkError::BottleneckLength {
                want: self.cfg.bottleneck_dim,
                got: z.len(),
            });
        }
        let zb = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("length checked");
        let f = self.decoder_site_eval(ps, zb);
        let data = f.index_axis_move(Axis(0), 0);
        ensure_finite(data.iter(), "decoder")?;
        Ok(FeatureMap { data, site_tag: SiteTag::DecoderSite })
    }

    /// Fuses encoder and decoder site features through the attention module.
    pub fn attention_fuse(
        &self,
        ps: &ParamStore<f32>,
        f_enc: &FeatureMap,
        f_dec: &FeatureMap,
    ) -> Result<(FeatureMap, AttentionMaps), NetworkError> {
        let m = self.cfg.base_filters;
        let site = self.cfg.attention_site_size;
        for fm in [f_enc, f_dec] {
            let (c, h, w) = fm.data.dim();
            if (c, h, w) != (m, site, site) {
                return Err(NetworkError::ShapeMismatch {
                    want: vec![m, site, site],
                    got: vec![c, h, w],
                });
            }
        }
        let fe = f_enc.data.clone().insert_axis(Axis(0));
        let fd = f_dec.data.clone().insert_axis(Axis(0));
        let (ae, ad, _) = self.attention_apply(ps, &fe, &fd);
        let fused = fuse_maps(&fe, &fd, &ae, &ad);
        let fused = fused.index_axis_move(Axis(0), 0);
        ensure_finite(fused.iter(), "attention")?;
        let maps = AttentionMaps {
            attn_enc: FeatureMap {
                data: ae.index_axis_move(Axis(0), 0),
                site_tag: SiteTag::AttnEnc,
            },
            attn_dec: FeatureMap {
                data: ad.index_axis_move(Axis(0), 0),
                site_tag: SiteTag::AttnDec,
            },
        };
        Ok((FeatureMap { data: fused, site_tag: SiteTag::Fused }, maps))
    }

    /// Reconstructs one occluded image (inference mode).
    pub fn generator_forward(
        &self,
        ps: &ParamStore<f32>,
        x_occ: &ImageTensor,
        mode: ForwardMode,
    ) -> Result<(ImageTensor, Option<AttentionMaps>), NetworkError> {
        let xb = self.image_to_batch(x_occ)?;
        let (y, maps) = self.generator_eval(ps, &xb, mode)?;
        let y = y.index_axis_move(Axis(0), 0);
        ensure_finite(y.iter(), "generator")?;
        let img = ImageTensor::new(y, RangeTag::Signed)
            .map_err(|_| NetworkError::NonFinite { site: "generator" })?;
        let maps = maps.map(|(ae, ad)| AttentionMaps {
            attn_enc: FeatureMap {
                data: ae.index_axis_move(Axis(0), 0),
                site_tag: SiteTag::AttnEnc,
            },
            attn_dec: FeatureMap {
                data: ad.index_axis_move(Axis(0), 0),
                site_tag: SiteTag::AttnDec,
            },
        });
        Ok((img, maps))
    }

    /// Scores one image as real (inference mode); strictly inside (0, 1).
    pub fn discriminator_forward(
        &self,
        ps: &ParamStore<f32>,
        x: &ImageTensor,
    ) -> Result<f32, NetworkError> {
        let xb = self.image_to_batch(x)?;
        let p = self.discriminator_eval(ps, &xb)?;
        ensure_finite(p.iter(), "discriminator")?;
        Ok(p[0])
    }
}

/// Builds the model for `config` and draws fresh parameters from `seed`.
pub fn init_network<E: Elem>(
    config: NetworkConfig,
    seed: u64,
) -> Result<(Model, ParamStore<E>), NetworkError> {
    let model = Model::new(config)?;
    let ps = model.init_params(seed);
    Ok((model, ps))
}
