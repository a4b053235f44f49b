//! Recurrent categorical policy: a single GRU layer with a linear softmax head.
//!
//! Gate math follows the standard formulation
//!   z = sigmoid(Wz [x, h] + bz)
//!   r = sigmoid(Wr [x, h] + br)
//!   c = tanh(Wc [x, r .* h] + bc)
//!   h' = (1 - z) .* h + z .* c
//! with backpropagation through time over whole episodes.
//! Parameter layout order: wz, bz, wr, br, wc, bc, wo, bo.

use rand_chacha::ChaCha8Rng;

use super::math::{matvec, matvec_acc, matvec_t_acc, outer_acc, sigmoid};
use super::{xavier_fill, CategoricalDist, ObsNormalizer, ParamBundle, OUTPUT_SCALE};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GruPolicy {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub normalizer: ObsNormalizer,
    pub params: ParamBundle,
}

/// Per-step activations kept for BPTT.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

impl GruPolicy {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        normalizer: ObsNormalizer,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_hidden(input_dim, 32, output_dim, normalizer, rng)
    }

    pub fn with_hidden(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        normalizer: ObsNormalizer,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = hidden_dim;
        let cat = input_dim + h;
        let mut params = ParamBundle::new();
        for name in ["wz", "wr", "wc"] {
            params.push(name, vec![h, cat], xavier_fill(h, cat, 1.0, rng));
            // matching bias follows its weight
            let b = match name {
                "wz" => "bz",
                "wr" => "br",
                _ => "bc",
            };
            params.push(b, vec![h], vec![0.0; h]);
        }
        params.push(
            "wo",
            vec![output_dim, h],
            xavier_fill(output_dim, h, OUTPUT_SCALE, rng),
        );
        params.push("bo", vec![output_dim], vec![0.0; output_dim]);
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            normalizer,
            params,
        }
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        normalizer: ObsNormalizer,
        params: ParamBundle,
    ) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            normalizer,
            params,
        }
    }

    /// Hidden state at episode start.
    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden_dim]
    }

    /// One recurrent step: consumes the previous hidden state, returns the new
    /// one together with the action distribution.
    pub fn step(&self, h_prev: &[f64], obs: &[f64]) -> Result<(Vec<f64>, CategoricalDist)> {
        let (_, dist, cache) = self.step_cached(h_prev, obs)?;
        Ok((cache.h, dist))
    }

    fn step_cached(
        &self,
        h_prev: &[f64],
        obs: &[f64],
    ) -> Result<(Vec<f64>, CategoricalDist, GruStepCache)> {
        if obs.len() != self.input_dim {
            return Err(Error::config(format!(
                "observation dim {} does not match policy input dim {}",
                obs.len(),
                self.input_dim
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite observation"));
        }
        let nh = self.hidden_dim;
        let x = self.normalizer.normalize(obs);
        let cat = self.input_dim + nh;

        let mut u = Vec::with_capacity(cat);
        u.extend_from_slice(&x);
        u.extend_from_slice(h_prev);

        let mut z = vec![0.0; nh];
        matvec(self.params.get("wz"), nh, cat, &u, &mut z);
        for (v, b) in z.iter_mut().zip(self.params.get("bz")) {
            *v = sigmoid(*v + b);
        }

        let mut r = vec![0.0; nh];
        matvec(self.params.get("wr"), nh, cat, &u, &mut r);
        for (v, b) in r.iter_mut().zip(self.params.get("br")) {
            *v = sigmoid(*v + b);
        }

        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
        let mut v_in = Vec::with_capacity(cat);
        v_in.extend_from_slice(&x);
        v_in.extend_from_slice(&rh);

        let mut c = vec![0.0; nh];
        matvec(self.params.get("wc"), nh, cat, &v_in, &mut c);
        for (v, b) in c.iter_mut().zip(self.params.get("bc")) {
            *v = (*v + b).tanh();
        }

        let h: Vec<f64> = (0..nh)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i])
            .collect();

        let mut logits = vec![0.0; self.output_dim];
        matvec(self.params.get("wo"), self.output_dim, nh, &h, &mut logits);
        for (v, b) in logits.iter_mut().zip(self.params.get("bo")) {
            *v += b;
        }

        let cache = GruStepCache {
            x,
            h_prev: h_prev.to_vec(),
            z,
            r,
            rh,
            c,
            h: h.clone(),
        };
        Ok((h, CategoricalDist::from_logits(&logits), cache))
    }

    /// Forward over a full episode, hidden state threaded from zeros.
    pub fn sequence_forward(
        &self,
        obs_seq: &[Vec<f64>],
    ) -> Result<(Vec<CategoricalDist>, Vec<GruStepCache>)> {
        let mut h = self.initial_hidden();
        let mut dists = Vec::with_capacity(obs_seq.len());
        let mut caches = Vec::with_capacity(obs_seq.len());
        for obs in obs_seq {
            let (h_next, dist, cache) = self.step_cached(&h, obs)?;
            h = h_next;
            dists.push(dist);
            caches.push(cache);
        }
        Ok((dists, caches))
    }

    /// BPTT: accumulate parameter gradients given per-step dLoss/dLogits.
    pub fn backward_sequence(
        &self,
        caches: &[GruStepCache],
        dlogits_seq: &[Vec<f64>],
        grad: &mut ParamBundle,
    ) {
        assert_eq!(caches.len(), dlogits_seq.len());
        let nh = self.hidden_dim;
        let cat = self.input_dim + nh;
        let mut dh_carry = vec![0.0; nh];

        for (cache, dlogits) in caches.iter().zip(dlogits_seq).rev() {
            // Readout.
            outer_acc(grad.get_mut("wo"), dlogits, &cache.h);
            for (g, d) in grad.get_mut("bo").iter_mut().zip(dlogits) {
                *g += d;
            }
            let mut dh = dh_carry;
            matvec_t_acc(self.params.get("wo"), self.output_dim, nh, dlogits, &mut dh);

            // Blend h' = (1-z) h_prev + z c.
            let dz: Vec<f64> = (0..nh)
                .map(|i| dh[i] * (cache.c[i] - cache.h_prev[i]))
                .collect();
            let dc: Vec<f64> = (0..nh).map(|i| dh[i] * cache.z[i]).collect();
            let mut dh_prev: Vec<f64> = (0..nh).map(|i| dh[i] * (1.0 - cache.z[i])).collect();

            // Candidate c = tanh(Wc [x, rh] + bc).
            let dac: Vec<f64> = (0..nh)
                .map(|i| dc[i] * (1.0 - cache.c[i] * cache.c[i]))
                .collect();
            let mut v_in = Vec::with_capacity(cat);
            v_in.extend_from_slice(&cache.x);
            v_in.extend_from_slice(&cache.rh);
            outer_acc(grad.get_mut("wc"), &dac, &v_in);
            for (g, d) in grad.get_mut("bc").iter_mut().zip(&dac) {
                *g += d;
            }
            let mut dv = vec![0.0; cat];
            matvec_t_acc(self.params.get("wc"), nh, cat, &dac, &mut dv);
            let drh = &dv[self.input_dim..];
            let dr: Vec<f64> = (0..nh).map(|i| drh[i] * cache.h_prev[i]).collect();
            for i in 0..nh {
                dh_prev[i] += drh[i] * cache.r[i];
            }

            let mut u = Vec::with_capacity(cat);
            u.extend_from_slice(&cache.x);
            u.extend_from_slice(&cache.h_prev);

            // Reset gate.
            let dar: Vec<f64> = (0..nh)
                .map(|i| dr[i] * cache.r[i] * (1.0 - cache.r[i]))
                .collect();
            outer_acc(grad.get_mut("wr"), &dar, &u);
            for (g, d) in grad.get_mut("br").iter_mut().zip(&dar) {
                *g += d;
            }
            let mut du = vec![0.0; cat];
            matvec_t_acc(self.params.get("wr"), nh, cat, &dar, &mut du);
            for i in 0..nh {
                dh_prev[i] += du[self.input_dim + i];
            }

            // Update gate.
            let daz: Vec<f64> = (0..nh)
                .map(|i| dz[i] * cache.z[i] * (1.0 - cache.z[i]))
                .collect();
            outer_acc(grad.get_mut("wz"), &daz, &u);
            for (g, d) in grad.get_mut("bz").iter_mut().zip(&daz) {
                *g += d;
            }
            let mut du = vec![0.0; cat];
            matvec_t_acc(self.params.get("wz"), nh, cat, &daz, &mut du);
            for i in 0..nh {
                dh_prev[i] += du[self.input_dim + i];
            }

            dh_carry = dh_prev;
        }
    }

    /// Forward-mode directional derivative of per-step logits along a
    /// parameter tangent, propagating the hidden-state tangent through time.
    pub fn jvp_sequence(&self, caches: &[GruStepCache], tangent: &ParamBundle) -> Vec<Vec<f64>> {
        let nh = self.hidden_dim;
        let cat = self.input_dim + nh;
        let mut dh_prev = vec![0.0; nh];
        let mut out = Vec::with_capacity(caches.len());

        for cache in caches {
            let mut u = Vec::with_capacity(cat);
            u.extend_from_slice(&cache.x);
            u.extend_from_slice(&cache.h_prev);
            let mut du = vec![0.0; cat];
            du[self.input_dim..].copy_from_slice(&dh_prev);

            let mut daz = vec![0.0; nh];
            matvec(tangent.get("wz"), nh, cat, &u, &mut daz);
            matvec_acc(self.params.get("wz"), nh, cat, &du, &mut daz);
            for (d, b) in daz.iter_mut().zip(tangent.get("bz")) {
                *d += b;
            }
            let dz: Vec<f64> = (0..nh)
                .map(|i| daz[i] * cache.z[i] * (1.0 - cache.z[i]))
                .collect();

            let mut dar = vec![0.0; nh];
            matvec(tangent.get("wr"), nh, cat, &u, &mut dar);
            matvec_acc(self.params.get("wr"), nh, cat, &du, &mut dar);
            for (d, b) in dar.iter_mut().zip(tangent.get("br")) {
                *d += b;
            }
            let dr: Vec<f64> = (0..nh)
                .map(|i| dar[i] * cache.r[i] * (1.0 - cache.r[i]))
                .collect();

            let drh: Vec<f64> = (0..nh)
                .map(|i| dr[i] * cache.h_prev[i] + cache.r[i] * dh_prev[i])
                .collect();
            let mut v_in = Vec::with_capacity(cat);
            v_in.extend_from_slice(&cache.x);
            v_in.extend_from_slice(&cache.rh);
            let mut dv = vec![0.0; cat];
            dv[self.input_dim..].copy_from_slice(&drh);

            let mut dac = vec![0.0; nh];
            matvec(tangent.get("wc"), nh, cat, &v_in, &mut dac);
            matvec_acc(self.params.get("wc"), nh, cat, &dv, &mut dac);
            for (d, b) in dac.iter_mut().zip(tangent.get("bc")) {
                *d += b;
            }
            let dc: Vec<f64> = (0..nh)
                .map(|i| dac[i] * (1.0 - cache.c[i] * cache.c[i]))
                .collect();

            let dh: Vec<f64> = (0..nh)
                .map(|i| {
                    -dz[i] * cache.h_prev[i]
                        + (1.0 - cache.z[i]) * dh_prev[i]
                        + dz[i] * cache.c[i]
                        + cache.z[i] * dc[i]
                })
                .collect();

            let mut dlogits = vec![0.0; self.output_dim];
            matvec(tangent.get("wo"), self.output_dim, nh, &cache.h, &mut dlogits);
            matvec_acc(self.params.get("wo"), self.output_dim, nh, &dh, &mut dlogits);
            for (d, b) in dlogits.iter_mut().zip(tangent.get("bo")) {
                *d += b;
            }
            out.push(dlogits);
            dh_prev = dh;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_params_keep_hidden_at_zero_and_uniform_output() {
        let mut rng = rng_from_seed(1);
        let mut p = GruPolicy::with_hidden(3, 8, 5, ObsNormalizer::identity(3), &mut rng);
        let zeros = vec![0.0; p.params.total_dim()];
        p.params.unflatten(&zeros).unwrap();
        let h0 = p.initial_hidden();
        let (h1, dist) = p.step(&h0, &[0.4, -0.2, 0.8]).unwrap();
        // z = 0.5, c = 0, h_prev = 0 -> h' = 0.5*0 + 0.5*0 = 0.
        assert!(h1.iter().all(|&v| v == 0.0));
        for &pr in dist.probs() {
            assert!((pr - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn large_negative_update_bias_freezes_memory() {
        let mut rng = rng_from_seed(2);
        let mut p = GruPolicy::with_hidden(2, 4, 3, ObsNormalizer::identity(2), &mut rng);
        for b in p.params.get_mut("bz") {
            *b = -40.0; // z ~ 0 => h' = h
        }
        let h: Vec<f64> = vec![0.3, -0.7, 0.1, 0.9];
        let (h_next, _) = p.step(&h, &[0.5, -0.5]).unwrap();
        for (a, b) in h.iter().zip(&h_next) {
            assert!((a - b).abs() < 1e-12, "memory passthrough violated");
        }
    }

    #[test]
    fn hidden_norm_stays_finite_over_long_episodes() {
        let mut rng = rng_from_seed(3);
        let p = GruPolicy::new(4, 9, ObsNormalizer::identity(4), &mut rng);
        let mut h = p.initial_hidden();
        let mut obs_rng = rng_from_seed(99);
        for _ in 0..500 {
            let obs: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut obs_rng, -1.0..1.0)).collect();
            let (h_next, _) = p.step(&h, &obs).unwrap();
            h = h_next;
        }
        let norm: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite());
        // Gated blend of tanh candidates keeps each entry in (-1, 1).
        assert!(h.iter().all(|v| v.abs() < 1.0));
    }
}
