//! The full per-point pose network (encoders, correlation fusion, dense head)
//! and its checkpoint format.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::{fuse_backward, fuse_forward, CorrelationParams, FuseCache, FusionStrategy};
use crate::error::{Error, Result};
use crate::math::{Matrix, Param, ParamSet};
use crate::pose::{
    decode_dense, decode_dense_backward, select_best, DenseGrad, DensePrediction, HeadCache, PoseHead,
    RigidTransform, TranslationFrame,
};
use crate::synth::{encode, encode_backward, mix_seed, Encoded, EncoderParams, Observation};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CFCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture of a [`PoseNet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub strategy: FusionStrategy,
    /// Feature width of each modality (`d_rgb = d_dep`).
    pub dim: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    /// Points are multiplied by this before encoding; head translations are
    /// divided by it.
    pub point_scale: f64,
    /// Center observed points on their centroid (estimator) or keep them
    /// as given (refiner).
    pub centered: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::FuseV2,
            dim: 32,
            encoder_hidden: 32,
            head_hidden: 64,
            point_scale: 10.0,
            centered: true,
        }
    }
}

impl NetConfig {
    /// Same architecture configured as a refiner.
    pub fn refiner(self) -> Self {
        Self { centered: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.encoder_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(self.point_scale > 0.0) || !self.point_scale.is_finite() {
            return Err(Error::Config(format!("point scale must be positive, got {}", self.point_scale)));
        }
        Ok(())
    }

    fn to_text(self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy={}", self.strategy);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "encoder_hidden={}", self.encoder_hidden);
        let _ = writeln!(s, "head_hidden={}", self.head_hidden);
        let _ = writeln!(s, "point_scale={}", self.point_scale);
        let _ = writeln!(s, "centered={}", self.centered);
        s
    }

    fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut cfg = NetConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad architecture line `{line}`"))?;
            let bad = |_| format!("bad value for {k}: `{v}`");
            match k {
                "strategy" => cfg.strategy = v.parse().map_err(|e: Error| e.to_string())?,
                "dim" => cfg.dim = v.parse().map_err(bad)?,
                "encoder_hidden" => cfg.encoder_hidden = v.parse().map_err(bad)?,
                "head_hidden" => cfg.head_hidden = v.parse().map_err(bad)?,
                "point_scale" => cfg.point_scale = v.parse().map_err(|_| format!("bad point_scale `{v}`"))?,
                "centered" => cfg.centered = v.parse().map_err(|_| format!("bad centered `{v}`"))?,
                _ => return Err(format!("unknown architecture key `{k}`")),
            }
        }
        Ok(cfg)
    }
}

/// Encoders, correlation module and dense pose head.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    pub config: NetConfig,
    pub encoder: EncoderParams,
    pub correlation: CorrelationParams,
    pub head: PoseHead,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct NetCache {
    encoded: Encoded,
    fuse: FuseCache,
    head: HeadCache,
    frame: TranslationFrame,
    pred: DensePrediction,
}

impl NetCache {
    pub fn prediction(&self) -> &DensePrediction {
        &self.pred
    }

    pub fn fuse_cache(&self) -> &FuseCache {
        &self.fuse
    }
}

impl PoseNet {
    /// Randomly initialized network; all correlation gains start at zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6e6574));
        let mut encoder = EncoderParams::new("enc", config.encoder_hidden, config.dim, config.point_scale, &mut rng);
        encoder.centered = config.centered;
        let correlation = CorrelationParams::new("corr", config.dim, &mut rng);
        let head = PoseHead::new("head", 2 * config.dim, config.head_hidden, &mut rng);
        Ok(Self {
            config,
            encoder,
            correlation,
            head,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.config.strategy
    }

    fn frame(&self, origin: [f64; 3]) -> TranslationFrame {
        TranslationFrame {
            origin,
            scale: 1.0 / self.config.point_scale,
        }
    }

    pub fn forward(&self, obs: &Observation) -> Result<NetCache> {
        let encoded = encode(obs, &self.encoder)?;
        let (fused, fuse) = fuse_forward(&encoded.features, &self.correlation, self.config.strategy)?;
        if !fused.is_finite() {
            return Err(Error::Numeric("fused features are not finite".into()));
        }
        let head = self.head.forward(&fused)?;
        let frame = self.frame(encoded.centroid);
        let pred = decode_dense(head.raw(), frame)?;
        Ok(NetCache {
            encoded,
            fuse,
            head,
            frame,
            pred,
        })
    }

    pub fn predict(&self, obs: &Observation) -> Result<DensePrediction> {
        Ok(self.forward(obs)?.pred)
    }

    /// Most confident per-point hypothesis.
    pub fn estimate(&self, obs: &Observation) -> Result<RigidTransform> {
        select_best(&self.predict(obs)?)
    }

    /// Accumulates parameter gradients given `dL/d(prediction)`.
    pub fn backward(&mut self, cache: &NetCache, g: &DenseGrad) -> Result<()> {
        let g_raw = decode_dense_backward(cache.head.raw(), &cache.pred, g, cache.frame);
        let g_fused = self.head.backward(&cache.head, &g_raw)?;
        let g_pair = fuse_backward(&cache.fuse, &mut self.correlation, &g_fused)?;
        encode_backward(&cache.encoded, &mut self.encoder, &g_pair)
    }

    /// The four correlation gains `[cc, pp, pc, cp]`.
    pub fn lambda_params_mut(&mut self) -> [&mut Param; 4] {
        let c = &mut self.correlation;
        [&mut c.lambda_cc, &mut c.lambda_pp, &mut c.lambda_pc, &mut c.lambda_cp]
    }

    /// FNV-1a over the bit patterns of every parameter value.
    pub fn checksum(&self) -> u64 {
        checksum_values(&self.flat_values())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let arch = self.config.to_text();
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(arch.as_bytes());
        let mut tensors = Vec::new();
        self.visit(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, value) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
            for v in value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |detail: String| Error::format(path, detail);
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8).map_err(&fail)? != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let arch_len = r.u32().map_err(&fail)? as usize;
        let arch = std::str::from_utf8(r.take(arch_len).map_err(&fail)?)
            .map_err(|_| fail("architecture block is not UTF-8".into()))?;
        let config = NetConfig::from_text(arch).map_err(&fail)?;
        config.validate().map_err(|e| fail(e.to_string()))?;
        let mut net = PoseNet::new(config, 0)?;
        let count = r.u32().map_err(&fail)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32().map_err(&fail)? as usize;
            let name = String::from_utf8(r.take(len).map_err(&fail)?.to_vec())
                .map_err(|_| fail("tensor name is not UTF-8".into()))?;
            let rows = r.u32().map_err(&fail)? as usize;
            let cols = r.u32().map_err(&fail)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(r.take(8).map_err(&fail)?.try_into().unwrap()));
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes after last tensor".into()));
        }
        let mut expected = 0;
        net.visit(&mut |_| expected += 1);
        if expected != tensors.len() {
            return Err(fail(format!("{} tensors, architecture needs {expected}", tensors.len())));
        }
        let mut mismatch = None;
        let mut it = tensors.into_iter();
        net.visit_mut(&mut |p| {
            let (name, value) = it.next().unwrap();
            if name != p.name || value.shape() != p.value.shape() {
                mismatch.get_or_insert(format!("tensor `{name}` {:?} where `{}` expected", value.shape(), p.name));
            }
            p.value = value;
        });
        match mismatch {
            Some(m) => Err(fail(m)),
            None => Ok(net),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes, path)
    }
}

impl ParamSet for PoseNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.correlation.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.correlation.visit_mut(f);
        self.head.visit_mut(f);
    }
}

pub fn checksum_values(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Iteratively refines `initial`: each step re-expresses the observed points
/// in the current estimate's frame, predicts a residual `δ` there and updates
/// the estimate to `current ∘ δ`.
///
/// In camera coordinates the same update is the left composition
/// `(current ∘ δ ∘ current⁻¹) ∘ current`. With `iterations == 0` the input is
/// returned untouched.
pub fn refine(
    initial: &RigidTransform,
    obs: &Observation,
    refiner: &PoseNet,
    iterations: usize,
) -> Result<RigidTransform> {
    let mut current = *initial;
    for _ in 0..iterations {
        let local = obs.transformed(&current.inverse());
        let delta = refiner.estimate(&local)?;
        current = current.compose(&delta);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_scene, SceneConfig, Shape, SynthObject};

    fn scene() -> crate::synth::Scene {
        let obj = SynthObject::new("lshape", Shape::DEFAULT_LSHAPE, 100, 1).unwrap();
        make_scene(&obj, &SceneConfig { points: 16, ..Default::default() }, 5).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut net = PoseNet::new(NetConfig::default(), 3).unwrap();
        net.correlation.set_lambdas(0.1, -0.2, 0.3, 0.4);
        let bytes = net.to_checkpoint();
        let back = PoseNet::from_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.checksum(), net.checksum());
        assert_eq!(back.to_checkpoint(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let net = PoseNet::new(NetConfig { dim: 4, ..Default::default() }, 3).unwrap();
        let bytes = net.to_checkpoint();
        assert!(PoseNet::from_checkpoint(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PoseNet::from_checkpoint(&bad, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn seeds_change_parameters() {
        let a = PoseNet::new(NetConfig::default(), 1).unwrap();
        let b = PoseNet::new(NetConfig::default(), 2).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), PoseNet::new(NetConfig::default(), 1).unwrap().checksum());
    }

    #[test]
    fn refine_zero_iterations_is_identity() {
        let s = scene();
        let net = PoseNet::new(NetConfig::default().refiner(), 1).unwrap();
        let init = RigidTransform::new(crate::pose::Quaternion::new(0.3, 0.1, -0.5, 0.2), [0.01, 0.02, 0.3]);
        assert_eq!(refine(&init, &s.observation, &net, 0).unwrap(), init);
    }

    #[test]
    fn zero_refiner_head_keeps_pose() {
        let s = scene();
        let mut net = PoseNet::new(NetConfig::default().refiner(), 1).unwrap();
        net.head.output.weight.value.fill(0.0);
        net.head.output.bias.value.fill(0.0);
        let init = s.gt.compose(&RigidTransform::from_translation([0.01, 0.0, 0.0]));
        let out = refine(&init, &s.observation, &net, 2).unwrap();
        for (a, b) in out.to_array().iter().zip(init.to_array()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}
