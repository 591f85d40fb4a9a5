use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, concat_channels, conv2d, conv2d_backward, logistic,
    logistic_backward, relu, relu_backward, split_channels, upsample_nearest2,
    upsample_nearest2_backward, ConvCache, Tensor,
};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of time frames fed as channels.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoding stages before the bottleneck.
    pub depth: usize,
    /// Channels of the first stage; doubled at every stage.
    pub base_channels: usize,
}

impl UNetConfig {
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels: 3,
            depth: 2,
            base_channels: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument(
                "network channels and depth must be positive".into(),
            ));
        }
        if self.out_channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "the network predicts 3 maps, got out_channels = {}",
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Height and width must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << self.depth
    }

    fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// (in, out, kernel) of every convolution in parameter order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let d = self.depth;
        let mut v = Vec::with_capacity(5 * d + 3);
        let mut cin = self.in_channels;
        for s in 0..d {
            let c = self.stage_channels(s);
            v.push((cin, c, 3));
            v.push((c, c, 3));
            cin = c;
        }
        let cb = self.stage_channels(d);
        v.push((cin, cb, 3));
        v.push((cb, cb, 3));
        let mut cin = cb;
        for s in (0..d).rev() {
            let c = self.stage_channels(s);
            v.push((cin, c, 3));
            v.push((2 * c, c, 3));
            v.push((c, c, 3));
            cin = c;
        }
        v.push((cin, self.out_channels, 1));
        v
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(i, o, k)| o * i * k * k + o)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub layers: Vec<ConvParams<T>>,
}

/// Parameter gradients, one `(weights, bias)` pair per convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(net: &UNet<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![T::ZERO; l.w.len()], vec![T::ZERO; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in w.iter_mut().zip(ow) {
                *x += *y;
            }
            for (x, y) in b.iter_mut().zip(ob) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.layers {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x *= s;
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }
}

/// Activations kept for the backward pass.
pub struct Tape<T> {
    caches: Vec<ConvCache<T>>,
    /// ReLU outputs by convolution index (`None` for linear convolutions).
    acts: Vec<Option<Tensor<T>>>,
    pub output: Tensor<T>,
}

impl<T: Real> UNet<T> {
    /// He-normal weights, zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(cin, cout, k)| {
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                ConvParams {
                    cin,
                    cout,
                    ksize: k,
                    w: (0..cout * cin * k * k)
                        .map(|_| T::from_f64(normal.sample(&mut rng)))
                        .collect(),
                    b: vec![T::ZERO; cout],
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    cin: l.cin,
                    cout: l.cout,
                    ksize: l.ksize,
                    w: l.w.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    b: l.b.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let g = self.config.granularity();
        if x.h == 0 || x.w == 0 || x.h % g != 0 || x.w % g != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {g}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn conv(&self, i: usize, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let l = &self.layers[i];
        conv2d(x, &l.w, &l.b, l.ksize)
    }

    /// Forward pass keeping everything needed for [`UNet::backward`].
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<Tape<T>> {
        self.check_input(input)?;
        let d = self.config.depth;
        let n = self.layers.len();
        let mut caches = Vec::with_capacity(n);
        let mut acts: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        let mut step = |i: usize,
                        x: &Tensor<T>,
                        act: bool,
                        caches: &mut Vec<ConvCache<T>>|
         -> Result<Tensor<T>> {
            let (y, c) = self.conv(i, x)?;
            caches.push(c);
            if act {
                let y = relu(y);
                acts.push(Some(y.clone()));
                Ok(y)
            } else {
                acts.push(None);
                Ok(y)
            }
        };
        let mut skips = Vec::with_capacity(d);
        let mut x = input.clone();
        let mut li = 0;
        for _ in 0..d {
            x = step(li, &x, true, &mut caches)?;
            x = step(li + 1, &x, true, &mut caches)?;
            li += 2;
            let pooled = avg_pool2(&x)?;
            skips.push(x);
            x = pooled;
        }
        x = step(li, &x, true, &mut caches)?;
        x = step(li + 1, &x, true, &mut caches)?;
        li += 2;
        for s in (0..d).rev() {
            let up = step(li, &upsample_nearest2(&x), false, &mut caches)?;
            let cat = concat_channels(&up, &skips[s])?;
            x = step(li + 1, &cat, true, &mut caches)?;
            x = step(li + 2, &x, true, &mut caches)?;
            li += 3;
        }
        let (logits, c) = self.conv(li, &x)?;
        caches.push(c);
        acts.push(None);
        Ok(Tape {
            caches,
            acts,
            output: logistic(logits),
        })
    }

    /// Maps a normalized `in_channels × H × W` input to three maps in (0, 1).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(input)?.output)
    }

    /// Parameter gradients of a loss whose gradient with respect to the
    /// network output is `gout`.
    pub fn backward(&self, tape: &Tape<T>, gout: Tensor<T>) -> Grads<T> {
        let d = self.config.depth;
        let mut grads = Grads::zeros_like(self);
        let back =
            |i: usize, g: Tensor<T>, grads: &mut Grads<T>, need: bool| -> Option<Tensor<T>> {
                let g = match &tape.acts[i] {
                    Some(y) => relu_backward(g, y),
                    None => g,
                };
                let l = &self.layers[i];
                let (gw, gb) = &mut grads.layers[i];
                conv2d_backward(&g, &tape.caches[i], &l.w, gw, gb, l.ksize, need)
            };
        let head = self.layers.len() - 1;
        let g = logistic_backward(gout, &tape.output);
        let mut g = back(head, g, &mut grads, true).expect("input gradient requested");
        let mut li = head;
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..d).map(|_| None).collect();
        for s in 0..d {
            li -= 3;
            g = back(li + 2, g, &mut grads, true).expect("input gradient requested");
            let gcat = back(li + 1, g, &mut grads, true).expect("input gradient requested");
            let up_c = self.layers[li].cout;
            let (gu, gskip) = split_channels(gcat, up_c);
            skip_grads[s] = Some(gskip);
            let gu = back(li, gu, &mut grads, true).expect("input gradient requested");
            g = upsample_nearest2_backward(&gu);
        }
        li -= 2;
        g = back(li + 1, g, &mut grads, true).expect("input gradient requested");
        g = back(li, g, &mut grads, true).expect("input gradient requested");
        for s in (0..d).rev() {
            li -= 2;
            let mut gs = avg_pool2_backward(&g);
            let skip = skip_grads[s].take().expect("skip gradient recorded");
            for (a, b) in gs.data.iter_mut().zip(&skip.data) {
                *a += *b;
            }
            g = back(li + 1, gs, &mut grads, true).expect("input gradient requested");
            match back(li, g, &mut grads, li != 0) {
                Some(next) => g = next,
                None => break,
            }
        }
        grads
    }
}
