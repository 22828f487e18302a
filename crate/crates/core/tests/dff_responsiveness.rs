use actlumos::fusion::{Fusion, FusionVariant};
use actlumos::nn::Linear;
use actlumos::objectives::ce_grad;
use actlumos::optim::{AdamW, AdamWConfig};
use actlumos::params::Parameters;
use actlumos::rng::{self, Rng};
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

const T: usize = 8;
const C: usize = 8;

/// DFF gate followed by a linear classifier on the time-averaged fused sequence.
#[derive(Clone)]
struct GatedClassifier {
    fusion: Fusion,
    classifier: Linear,
}

impl Parameters for GatedClassifier {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fusion.visit("fusion", f);
        self.classifier.visit("classifier", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fusion.visit_mut("fusion", f);
        self.classifier.visit_mut("classifier", f);
    }
}

/// Class signal on channel 0 of one stream with faint noise elsewhere; the
/// other stream is loud noise. The informative stream is dark for the first
/// half of the sequence and retinex for the second.
fn sample(rng: &mut Rng) -> (Array2<f64>, Array2<f64>, usize) {
    let label = rng.random_range(0..2);
    let sign = if label == 0 { 1.0 } else { -1.0 };
    let quiet = Normal::new(0.0, 0.1).unwrap();
    let loud = Normal::new(0.0, 3.0).unwrap();
    let mut dark = Array2::zeros((T, C));
    let mut ret = Array2::zeros((T, C));
    for t in 0..T {
        let (signal, noise) = if t < T / 2 { (&mut dark, &mut ret) } else { (&mut ret, &mut dark) };
        for c in 0..C {
            signal[[t, c]] = quiet.sample(rng) + if c == 0 { 2.0 * sign } else { 0.0 };
            noise[[t, c]] = loud.sample(rng);
        }
    }
    (dark, ret, label)
}

#[test]
fn trained_gate_follows_the_informative_stream() {
    let mut rng = rng::seeded(31);
    let mut model = GatedClassifier { fusion: Fusion::new(FusionVariant::Dff, C, &mut rng), classifier: Linear::new(C, 2, &mut rng) };
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() }, &model);
    for _ in 0..300 {
        let mut grads = model.zeroed();
        for _ in 0..16 {
            let (dark, ret, label) = sample(&mut rng);
            let (fused, cache) = model.fusion.forward(Some(&dark), Some(&ret)).unwrap();
            let pooled: Array1<f64> = fused.mean_axis(Axis(0)).unwrap();
            let logits = model.classifier.forward_vec(&pooled);
            let (_, d_logits) = ce_grad(&logits, label).unwrap();
            let d_pooled = model.classifier.backward_vec(&pooled, &(d_logits / 16.0), &mut grads.classifier);
            let d_fused = Array2::from_shape_fn((T, C), |(_, c)| d_pooled[c] / T as f64);
            model.fusion.backward(&cache, &d_fused, &mut grads.fusion);
        }
        opt.update(&mut model, &grads).unwrap();
    }

    let (mut first_half_dark, mut second_half_ret) = (0.0, 0.0);
    let n = 200;
    for _ in 0..n {
        let (dark, ret, _) = sample(&mut rng);
        let (_, cache) = model.fusion.forward(Some(&dark), Some(&ret)).unwrap();
        let w = cache.gate_weights().unwrap().data;
        first_half_dark += w.column(0).iter().take(T / 2).sum::<f64>() / (T / 2) as f64;
        second_half_ret += w.column(1).iter().skip(T / 2).sum::<f64>() / (T / 2) as f64;
    }
    let (a, b) = (first_half_dark / n as f64, second_half_ret / n as f64);
    assert!(a > 0.5 && b > 0.5, "mean weight on the informative stream: first half {a:.3}, second half {b:.3}");
}
