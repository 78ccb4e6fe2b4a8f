use serde::{Deserialize, Serialize};

use super::layers::{
    concat_backward, concat_forward, conv2d_backward, conv2d_forward, deconv2x2s2_backward,
    deconv2x2s2_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
    LayerKind, LayerParams,
};
use crate::{Error, Result, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of 2x down-samplings.
    pub depth: usize,
    /// Channels of the first encoder stage; doubles at every level.
    pub base_channels: usize,
    pub input_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            input_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("depth", self.depth),
            ("base_channels", self.base_channels),
            ("input_channels", self.input_channels),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.depth > 8 {
            return Err(Error::config("depth", "at most 8 down-samplings supported"));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Validation(format!(
                "input {h}x{w} is not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, kind, out, in)` of every layer, in parameter order.
    pub fn layout(&self) -> Vec<(String, LayerKind, usize, usize)> {
        let mut layers = Vec::new();
        let mut in_ch = self.input_channels;
        for level in 0..=self.depth {
            let ch = self.channels(level);
            layers.push((format!("enc{level}.conv1"), LayerKind::Conv, ch, in_ch));
            layers.push((format!("enc{level}.conv2"), LayerKind::Conv, ch, ch));
            in_ch = ch;
        }
        for level in (0..self.depth).rev() {
            let ch = self.channels(level);
            layers.push((format!("dec{level}.up"), LayerKind::Deconv, ch, 2 * ch));
            layers.push((format!("dec{level}.conv1"), LayerKind::Conv, ch, 2 * ch));
            layers.push((format!("dec{level}.conv2"), LayerKind::Conv, ch, ch));
        }
        layers.push(("head".into(), LayerKind::Conv, 1, self.base_channels));
        layers
    }
}

/// Cached activations of a conv-relu-conv-relu block.
#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    h1: Tensor,
    h2: Tensor,
}

#[derive(Debug, Clone)]
struct ImageCache {
    enc: Vec<BlockCache>,
    pool_argmax: Vec<Vec<usize>>,
    /// Input of each decoder stage's deconvolution, deepest first.
    up_inputs: Vec<Tensor>,
    dec: Vec<BlockCache>,
    head_input: Tensor,
}

/// Same-padding U-Net with max-pool down-sampling, stride-2 deconvolution
/// up-sampling and skip concatenation, ending in a single-channel logit map.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    params: Vec<LayerParams>,
    cache: Option<Vec<ImageCache>>,
}

impl UNet {
    /// All-zero parameters.
    pub fn zeros(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg
            .layout()
            .into_iter()
            .map(|(_, kind, o, i)| LayerParams::zeros(o, i, kind.kernel_size()))
            .collect();
        Ok(Self {
            cfg,
            params,
            cache: None,
        })
    }

    pub fn from_params(cfg: UNetConfig, params: Vec<LayerParams>) -> Result<Self> {
        let reference = Self::zeros(cfg)?;
        if params.len() != reference.params.len() {
            return Err(Error::Validation(format!(
                "expected {} layers, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (p, r) in params.iter().zip(&reference.params) {
            p.kernels.check_same_shape(&r.kernels)?;
            p.biases.check_same_shape(&r.biases)?;
        }
        Ok(Self {
            cfg,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(LayerParams::num_params).sum()
    }

    fn check_batch(&self, images: &Tensor) -> Result<(usize, usize, usize)> {
        match *images.shape() {
            [n, c, h, w] if c == self.cfg.input_channels => {
                self.cfg.check_input(h, w)?;
                Ok((n, h, w))
            }
            _ => Err(Error::ShapeMismatch {
                left: images.shape().to_vec(),
                right: vec![0, self.cfg.input_channels, 0, 0],
            }),
        }
    }

    /// Logits `(N, H, W)` for images `(N, C, H, W)`, caching activations for
    /// the next [`UNet::backward`].
    pub fn forward(&mut self, images: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_batch(images)?;
        let mut caches = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * h * w);
        for image in split_batch(images) {
            let (logits, cache) = self.forward_image(&image, true)?;
            out.extend_from_slice(logits.data());
            caches.push(cache.expect("cache requested"));
        }
        self.cache = Some(caches);
        Ok(Tensor::from_parts(vec![n, h, w], out))
    }

    /// Forward pass that leaves the activation cache untouched.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_batch(images)?;
        let mut out = Vec::with_capacity(n * h * w);
        for image in split_batch(images) {
            out.extend_from_slice(self.forward_image(&image, false)?.0.data());
        }
        Ok(Tensor::from_parts(vec![n, h, w], out))
    }

    fn block_forward(&self, layer: usize, input: Tensor, keep: bool) -> Result<(Tensor, Option<BlockCache>)> {
        let h1 = relu_forward(&conv2d_forward(&input, &self.params[layer])?);
        let h2 = relu_forward(&conv2d_forward(&h1, &self.params[layer + 1])?);
        let cache = keep.then(|| BlockCache {
            input,
            h1,
            h2: h2.clone(),
        });
        Ok((h2, cache))
    }

    fn forward_image(&self, image: &Tensor, keep: bool) -> Result<(Tensor, Option<ImageCache>)> {
        let depth = self.cfg.depth;
        let mut enc = Vec::new();
        let mut pool_argmax = Vec::new();
        let mut skips = Vec::with_capacity(depth);
        let mut x = image.clone();
        for level in 0..=depth {
            let (h, cache) = self.block_forward(2 * level, x, keep)?;
            enc.extend(cache);
            if level < depth {
                let mp = maxpool2x2_forward(&h)?;
                if keep {
                    pool_argmax.push(mp.argmax);
                }
                skips.push(h);
                x = mp.output;
            } else {
                x = h;
            }
        }
        let mut up_inputs = Vec::new();
        let mut dec = Vec::new();
        let mut layer = 2 * (depth + 1);
        for _ in (0..depth).rev() {
            let up = deconv2x2s2_forward(&x, &self.params[layer])?;
            if keep {
                up_inputs.push(x);
            }
            let skip = skips.pop().expect("one skip per level");
            let cat = concat_forward(&skip, &up)?;
            let (h, cache) = self.block_forward(layer + 1, cat, keep)?;
            dec.extend(cache);
            x = h;
            layer += 3;
        }
        let logits = conv2d_forward(&x, &self.params[layer])?;
        let cache = keep.then_some(ImageCache {
            enc,
            pool_argmax,
            up_inputs,
            dec,
            head_input: x,
        });
        let (_, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        Ok((logits.reshape([h, w])?, cache))
    }

    fn block_backward(
        &self,
        layer: usize,
        cache: &BlockCache,
        grad: &Tensor,
        grads: &mut [LayerParams],
    ) -> Result<Tensor> {
        let g2 = relu_backward(&cache.h2, grad)?;
        let (g_h1, gp2) = conv2d_backward(&cache.h1, &self.params[layer + 1], &g2)?;
        grads[layer + 1].add_assign(&gp2)?;
        let g1 = relu_backward(&cache.h1, &g_h1)?;
        let (g_in, gp1) = conv2d_backward(&cache.input, &self.params[layer], &g1)?;
        grads[layer].add_assign(&gp1)?;
        Ok(g_in)
    }

    /// Parameter gradients summed over the batch of the most recent
    /// [`UNet::forward`], given `dL/dlogits` of shape `(N, H, W)`.
    pub fn backward(&self, grad_logits: &Tensor) -> Result<Vec<LayerParams>> {
        let caches = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let n = caches.len();
        let (h, w) = match *grad_logits.shape() {
            [gn, h, w] if gn == n => (h, w),
            _ => {
                return Err(Error::ShapeMismatch {
                    left: grad_logits.shape().to_vec(),
                    right: vec![n, 0, 0],
                })
            }
        };
        let depth = self.cfg.depth;
        let mut grads: Vec<LayerParams> = self.params.iter().map(LayerParams::zeros_like).collect();
        for (i, cache) in caches.iter().enumerate() {
            let g = Tensor::from_parts(vec![1, h, w], grad_logits.data()[i * h * w..(i + 1) * h * w].to_vec());
            let head = 2 * (depth + 1) + 3 * depth;
            let (mut g, gp) = conv2d_backward(&cache.head_input, &self.params[head], &g)?;
            grads[head].add_assign(&gp)?;

            let mut skip_grads = Vec::with_capacity(depth);
            for step in (0..depth).rev() {
                // step indexes decoder stages in forward order (deepest first).
                let layer = 2 * (depth + 1) + 3 * step;
                let g_cat = self.block_backward(layer + 1, &cache.dec[step], &g, &mut grads)?;
                let skip_ch = cache.dec[step].input.shape()[0] / 2;
                let (g_skip, g_up) = concat_backward(&g_cat, skip_ch)?;
                let (g_x, gp) = deconv2x2s2_backward(&cache.up_inputs[step], &self.params[layer], &g_up)?;
                grads[layer].add_assign(&gp)?;
                skip_grads.push(g_skip);
                g = g_x;
            }
            // Decoder stage `step` consumed the skip of level `depth - 1 - step`,
            // so skip_grads[level] is the gradient for encoder level `level`.
            for level in (0..=depth).rev() {
                if level < depth {
                    let pooled_from = &cache.enc[level].h2;
                    let g_pool = maxpool2x2_backward(pooled_from.shape(), &cache.pool_argmax[level], &g)?;
                    let g_skip = &skip_grads[level];
                    g = g_pool.add(g_skip)?;
                }
                g = self.block_backward(2 * level, &cache.enc[level], &g, &mut grads)?;
            }
        }
        Ok(grads)
    }

    /// Which ReLUs fire and which input each max-pool window selects. The
    /// logits are smooth in the parameters wherever this pattern is constant.
    pub fn activation_pattern(&self, images: &Tensor) -> Result<Vec<usize>> {
        self.check_batch(images)?;
        let mut pattern = Vec::new();
        for image in split_batch(images) {
            let cache = self.forward_image(&image, true)?.1.expect("cache requested");
            for block in cache.enc.iter().chain(&cache.dec) {
                for t in [&block.h1, &block.h2] {
                    pattern.extend(t.data().iter().map(|&v| usize::from(v > 0.0)));
                }
            }
            for argmax in &cache.pool_argmax {
                pattern.extend_from_slice(argmax);
            }
        }
        Ok(pattern)
    }

    /// Forgets the activation cache.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// He-normal kernels, zero biases.
pub fn he_init(cfg: UNetConfig, rng: &mut SeededRng) -> Result<UNet> {
    cfg.validate()?;
    let params = cfg
        .layout()
        .into_iter()
        .map(|(_, kind, o, i)| LayerParams::he(o, i, kind.kernel_size(), rng))
        .collect();
    UNet::from_params(cfg, params)
}

fn split_batch(images: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let shape = vec![s[1], s[2], s[3]];
    images
        .data()
        .chunks(per)
        .map(move |c| Tensor::from_parts(shape.clone(), c.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_channel_counts() {
        let cfg = UNetConfig::default();
        let layout = cfg.layout();
        assert_eq!(layout.len(), 2 * 3 + 3 * 2 + 1);
        assert_eq!(layout[0], ("enc0.conv1".into(), LayerKind::Conv, 8, 1));
        assert_eq!(layout[5], ("enc2.conv2".into(), LayerKind::Conv, 32, 32));
        assert_eq!(layout[6], ("dec1.up".into(), LayerKind::Deconv, 16, 32));
        assert_eq!(layout[7], ("dec1.conv1".into(), LayerKind::Conv, 16, 32));
        assert_eq!(layout[12], ("head".into(), LayerKind::Conv, 1, 8));
        let net = UNet::zeros(cfg).unwrap();
        assert!(net.num_params() > 1_000 && net.num_params() < 100_000);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut net = UNet::zeros(UNetConfig::default()).unwrap();
        let x = SeededRng::new(1).uniform_tensor([2, 1, 8, 8], 0.0, 1.0);
        let z = net.forward(&x).unwrap();
        assert_eq!(z.shape(), &[2, 8, 8]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(z.sigmoid().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn spatial_shape_contract() {
        let mut rng = SeededRng::new(2);
        let net = he_init(UNetConfig { depth: 3, base_channels: 2, input_channels: 1 }, &mut rng).unwrap();
        let x = rng.uniform_tensor([1, 1, 16, 24], 0.0, 1.0);
        assert_eq!(net.predict(&x).unwrap().shape(), &[1, 16, 24]);
        assert!(net.predict(&rng.uniform_tensor([1, 1, 12, 16], 0.0, 1.0)).is_err());
        assert!(net.predict(&rng.uniform_tensor([1, 2, 16, 16], 0.0, 1.0)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = SeededRng::new(3);
        let mut net = he_init(UNetConfig::default(), &mut rng).unwrap();
        let x = rng.uniform_tensor([2, 1, 16, 16], 0.0, 1.0);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }

    #[test]
    fn backward_requires_forward() {
        let net = UNet::zeros(UNetConfig::default()).unwrap();
        assert!(matches!(net.backward(&Tensor::zeros([1, 4, 4])), Err(Error::State(_))));
    }

    #[test]
    fn he_init_statistics() {
        let a = he_init(UNetConfig::default(), &mut SeededRng::new(7)).unwrap();
        let b = he_init(UNetConfig::default(), &mut SeededRng::new(7)).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.params().iter().all(|p| p.biases.data().iter().all(|&v| v == 0.0)));

        // 100 x 100 x 1 x 1 kernel: 10,000 draws with fan_in = 100.
        let p = LayerParams::he(100, 100, 1, &mut SeededRng::new(11));
        let mean = p.kernels.mean();
        let var = p.kernels.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p.kernels.len() - 1) as f64;
        let expected = 2.0 / 100.0;
        assert!((var - expected).abs() < 0.1 * expected, "{var}");
    }
}
