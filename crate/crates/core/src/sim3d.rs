//! Point-cloud Siamese network: a PointNet-style shape encoder, cosine
//! candidate ranking and a fully-connected completion decoder.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, ShapeSample};
use crate::net::{cosine_similarity, relu, relu_backward, Linear, ParamStore, Scalar, SharedMlp, SharedMlpCache, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub widths: Vec<usize>,
    pub latent: usize,
    pub decoder_hidden: usize,
    pub decoder_points: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            latent: 128,
            decoder_hidden: 256,
            decoder_points: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVec(pub Vec<f64>);

impl LatentVec {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub points: Vec<Point>,
}

#[derive(Debug, Clone)]
pub struct EncodeCache<T> {
    mlp: SharedMlpCache<T>,
    pooled: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    latent: Tensor<T>,
    hidden: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSiamese {
    pub encoder: SharedMlp,
    pub head: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
    pub config: ShapeConfig,
}

// Max-pooling ignores repeated rows, and resampling repeats many points.
fn unique_rows<T: Scalar>(points: &[Point]) -> Result<Tensor<T>> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_unstable_by_key(|p| p.map(f32::to_bits));
    pts.dedup_by_key(|p| p.map(f32::to_bits));
    let data = pts.iter().flat_map(|p| p.iter().map(|&v| T::lit(v as f64))).collect();
    Tensor::new(vec![pts.len(), 3], data)
}

impl ShapeSiamese {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ShapeConfig, rng: &mut R) -> Self {
        let encoder = SharedMlp::new(store, "shape.encoder", 3, &cfg.widths, rng);
        let head = Linear::new(store, "shape.head", encoder.out_dim(), cfg.latent, rng);
        let dec_hidden = Linear::new(store, "shape.decoder.0", cfg.latent, cfg.decoder_hidden, rng);
        let dec_out = Linear::new(store, "shape.decoder.1", cfg.decoder_hidden, 3 * cfg.decoder_points, rng);
        Self {
            encoder,
            head,
            dec_hidden,
            dec_out,
            config: cfg.clone(),
        }
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, shape: &ShapeSample) -> Result<LatentVec> {
        Ok(self.encode_points(store, shape.points())?.0)
    }

    /// Encodes an arbitrary non-empty point set; the result only depends on
    /// the set of distinct points.
    pub fn encode_points<T: Scalar>(&self, store: &ParamStore<T>, points: &[Point]) -> Result<(LatentVec, EncodeCache<T>)> {
        let x = unique_rows::<T>(points)?;
        let (_, global, mlp) = self.encoder.forward(store, &x)?;
        let pooled = Tensor::new(vec![1, global.len()], global)?;
        let z = self.head.forward(store, &pooled)?;
        let latent = LatentVec(z.data().iter().map(|v| v.as_f64()).collect());
        Ok((latent, EncodeCache { mlp, pooled }))
    }

    /// Accumulates parameter gradients for a gradient on the latent.
    pub fn encode_backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &EncodeCache<T>, dlatent: &[f64]) -> Result<()> {
        let g = Tensor::new(vec![1, dlatent.len()], dlatent.iter().map(|&v| T::lit(v)).collect())?;
        let dpooled = self.head.backward(store, &cache.pooled, &g, true)?.expect("requested");
        self.encoder.backward(store, &cache.mlp, dpooled.data())?;
        Ok(())
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, z: &LatentVec) -> Result<DecoderOutput> {
        let (flat, _) = self.decode_with_cache(store, z)?;
        Ok(DecoderOutput {
            points: flat
                .chunks(3)
                .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
                .collect(),
        })
    }

    /// Decoded coordinates as a flat `3·M` vector in f64.
    pub fn decode_with_cache<T: Scalar>(&self, store: &ParamStore<T>, z: &LatentVec) -> Result<(Vec<f64>, DecodeCache<T>)> {
        if z.0.len() != self.config.latent {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} dims, decoder expects {}",
                z.0.len(),
                self.config.latent
            )));
        }
        let latent = Tensor::new(vec![1, z.0.len()], z.0.iter().map(|&v| T::lit(v)).collect())?;
        let hidden = relu(&self.dec_hidden.forward(store, &latent)?);
        let out = self.dec_out.forward(store, &hidden)?;
        let flat = out.data().iter().map(|v| v.as_f64()).collect();
        Ok((flat, DecodeCache { latent, hidden }))
    }

    /// Returns the gradient on the latent for a gradient on the flat output.
    pub fn decode_backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &DecodeCache<T>, dflat: &[f64]) -> Result<Vec<f64>> {
        let g = Tensor::new(vec![1, dflat.len()], dflat.iter().map(|&v| T::lit(v)).collect())?;
        let dh = self.dec_out.backward(store, &cache.hidden, &g, true)?.expect("requested");
        let dh = relu_backward(&cache.hidden, &dh);
        let dz = self.dec_hidden.backward(store, &cache.latent, &dh, true)?.expect("requested");
        Ok(dz.data().iter().map(|v| v.as_f64()).collect())
    }
}

pub fn similarity(candidate: &LatentVec, model: &LatentVec) -> Result<f64> {
    Ok(cosine_similarity(&candidate.0, &model.0)?.0)
}

/// Scores every candidate against the model latent. `None` marks an empty
/// crop, which scores −1. Returns the best index (lowest on ties) and the
/// scores.
pub fn rank_candidates<T: Scalar>(
    net: &ShapeSiamese,
    store: &ParamStore<T>,
    model: &LatentVec,
    candidates: &[Option<ShapeSample>],
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to rank".into()));
    }
    let scores = candidates
        .par_iter()
        .map(|c| match c {
            None => Ok(-1.0),
            Some(s) => similarity(&net.encode(store, s)?, model),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ShapeConfig {
        ShapeConfig {
            widths: vec![16, 32],
            latent: 8,
            decoder_hidden: 16,
            decoder_points: 32,
        }
    }

    fn random_shape(rng: &mut ChaCha8Rng) -> ShapeSample {
        let pts = (0..crate::geom::SHAPE_POINTS)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-0.7..0.7), rng.random_range(-1.0..1.0)])
            .collect();
        ShapeSample::new(pts).unwrap()
    }

    #[test]
    fn permutation_invariant_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let net = ShapeSiamese::new(&mut store, &small(), &mut rng);
        let s = random_shape(&mut rng);
        let mut p = s.points().to_vec();
        p.shuffle(&mut rng);
        let a = net.encode(&store, &s).unwrap();
        let b = net.encode(&store, &ShapeSample::new(p).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 8);
    }

    #[test]
    fn decoder_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let net = ShapeSiamese::new(&mut store, &small(), &mut rng);
        let z = net.encode(&store, &random_shape(&mut rng)).unwrap();
        let d = net.decode(&store, &z).unwrap();
        assert_eq!(d.points.len(), 32);
        assert_eq!(d, net.decode(&store, &z).unwrap());
    }

    #[test]
    fn similarity_properties() {
        let u = LatentVec(vec![1.0, -2.0, 0.5]);
        let v = LatentVec(vec![0.3, 0.1, 2.0]);
        assert!((similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let neg = LatentVec(u.0.iter().map(|x| -x).collect());
        assert!((similarity(&neg, &u).unwrap() + 1.0).abs() < 1e-12);
        let u2 = LatentVec(u.0.iter().map(|x| 2.0 * x).collect());
        assert!((similarity(&u2, &v).unwrap() - similarity(&u, &v).unwrap()).abs() < 1e-12);
        assert!(similarity(&LatentVec(vec![0.0; 3]), &v).is_err());
    }

    #[test]
    fn ranking_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let net = ShapeSiamese::new(&mut store, &small(), &mut rng);
        let s = random_shape(&mut rng);
        let model = net.encode(&store, &s).unwrap();
        assert!(rank_candidates(&net, &store, &model, &[]).is_err());
        let (best, scores) = rank_candidates(&net, &store, &model, &[None, Some(s.clone())]).unwrap();
        assert_eq!(best, 1);
        assert_eq!(scores[0], -1.0);
        let (best, _) = rank_candidates(&net, &store, &model, &[Some(s.clone()), Some(s)]).unwrap();
        assert_eq!(best, 0);
    }
}
