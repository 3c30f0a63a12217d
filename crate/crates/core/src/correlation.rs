//! Intra- and inter-modality correlation modules and the strategies that
//! combine them into fused per-point features.
//!
//! Both modules compute attention maps `C_A = softmax(C_Q C_Kᵀ)` and
//! `P_A = softmax(P_Q P_Kᵀ)` from the color and geometry features. The
//! intra module lets each modality attend over itself; the inter module
//! swaps the maps so each modality's values are weighted by the *other*
//! modality's attention. Updates are residual, scaled by gains that start
//! at zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{
    matmul, matmul_a_bt, matmul_at_b, row_softmax, row_softmax_backward, Linear, Matrix, Param,
    ParamSet,
};

/// Per-point color features `C` and geometric features `P` over the same points.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub color: Matrix,
    pub geometry: Matrix,
}

impl FeaturePair {
    pub fn new(color: Matrix, geometry: Matrix) -> Result<Self> {
        if color.rows() != geometry.rows() {
            return Err(Error::shape(
                "FeaturePair",
                format!("{} color rows vs {} geometry rows", color.rows(), geometry.rows()),
            ));
        }
        Ok(Self { color, geometry })
    }

    pub fn len(&self) -> usize {
        self.color.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Color-then-geometry concatenation per point.
    pub fn concat(&self) -> Matrix {
        self.color
            .hcat(&self.geometry)
            .expect("FeaturePair rows agree by construction")
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            color: self.color.permute_rows(perm),
            geometry: self.geometry.permute_rows(perm),
        }
    }
}

/// How the two correlation modules are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionStrategy {
    IntraOnly,
    InterOnly,
    /// Both modules computed from the original features, residuals summed.
    FuseV1,
    /// Intra module, then inter module on its output.
    FuseV2,
    /// Inter module, then intra module on its output.
    FuseV3,
    /// Plain concatenation with no correlation modules.
    ConcatBaseline,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::IntraOnly,
        FusionStrategy::InterOnly,
        FusionStrategy::FuseV1,
        FusionStrategy::FuseV2,
        FusionStrategy::FuseV3,
        FusionStrategy::ConcatBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::IntraOnly => "intra",
            FusionStrategy::InterOnly => "inter",
            FusionStrategy::FuseV1 => "fuse_v1",
            FusionStrategy::FuseV2 => "fuse_v2",
            FusionStrategy::FuseV3 => "fuse_v3",
            FusionStrategy::ConcatBaseline => "concat",
        }
    }

    fn stages(self) -> &'static [Stage] {
        const INTRA: Stage = Stage { intra: true, inter: false };
        const INTER: Stage = Stage { intra: false, inter: true };
        const BOTH: Stage = Stage { intra: true, inter: true };
        match self {
            FusionStrategy::IntraOnly => &[INTRA],
            FusionStrategy::InterOnly => &[INTER],
            FusionStrategy::FuseV1 => &[BOTH],
            FusionStrategy::FuseV2 => &[INTRA, INTER],
            FusionStrategy::FuseV3 => &[INTER, INTRA],
            FusionStrategy::ConcatBaseline => &[],
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let strategy = match key.as_str() {
            "intra" | "intra_only" | "intramcm" => FusionStrategy::IntraOnly,
            "inter" | "inter_only" | "intermcm" => FusionStrategy::InterOnly,
            "fuse_v1" | "v1" => FusionStrategy::FuseV1,
            "fuse_v2" | "v2" => FusionStrategy::FuseV2,
            "fuse_v3" | "v3" => FusionStrategy::FuseV3,
            "concat" | "concat_baseline" | "baseline" => FusionStrategy::ConcatBaseline,
            _ => return Err(Error::Config(format!("unknown fusion strategy `{s}`"))),
        };
        Ok(strategy)
    }
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    intra: bool,
    inter: bool,
}

/// Query/key/value projections for both modalities plus the four residual gains.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationParams {
    pub color_key: Linear,
    pub color_query: Linear,
    pub color_value: Linear,
    pub geom_key: Linear,
    pub geom_query: Linear,
    pub geom_value: Linear,
    /// Color-to-color gain (intra).
    pub lambda_cc: Param,
    /// Geometry-to-geometry gain (intra).
    pub lambda_pp: Param,
    /// Gain on color values weighted by geometry attention (inter).
    pub lambda_pc: Param,
    /// Gain on geometry values weighted by color attention (inter).
    pub lambda_cp: Param,
}

impl CorrelationParams {
    /// Random projections of width `dim`, all gains zero.
    pub fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            color_key: Linear::unbiased(&format!("{prefix}.color_key"), dim, dim, rng),
            color_query: Linear::new(&format!("{prefix}.color_query"), dim, dim, rng),
            color_value: Linear::new(&format!("{prefix}.color_value"), dim, dim, rng),
            geom_key: Linear::unbiased(&format!("{prefix}.geom_key"), dim, dim, rng),
            geom_query: Linear::new(&format!("{prefix}.geom_query"), dim, dim, rng),
            geom_value: Linear::new(&format!("{prefix}.geom_value"), dim, dim, rng),
            lambda_cc: Param::scalar(format!("{prefix}.lambda_cc"), 0.0),
            lambda_pp: Param::scalar(format!("{prefix}.lambda_pp"), 0.0),
            lambda_pc: Param::scalar(format!("{prefix}.lambda_pc"), 0.0),
            lambda_cp: Param::scalar(format!("{prefix}.lambda_cp"), 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.color_value.d_out()
    }

    pub fn set_lambdas(&mut self, cc: f64, pp: f64, pc: f64, cp: f64) {
        self.lambda_cc.value[(0, 0)] = cc;
        self.lambda_pp.value[(0, 0)] = pp;
        self.lambda_pc.value[(0, 0)] = pc;
        self.lambda_cp.value[(0, 0)] = cp;
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [
            self.lambda_cc.get(),
            self.lambda_pp.get(),
            self.lambda_pc.get(),
            self.lambda_cp.get(),
        ]
    }

    fn check(&self, pair: &FeaturePair) -> Result<()> {
        let d = self.dim();
        if pair.color.cols() != d || pair.geometry.cols() != d {
            return Err(Error::shape(
                "correlation",
                format!(
                    "feature widths {}/{} must both equal the common dimension {d}",
                    pair.color.cols(),
                    pair.geometry.cols()
                ),
            ));
        }
        Ok(())
    }
}

impl ParamSet for CorrelationParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.color_key.visit(f);
        self.color_query.visit(f);
        self.color_value.visit(f);
        self.geom_key.visit(f);
        self.geom_query.visit(f);
        self.geom_value.visit(f);
        f(&self.lambda_cc);
        f(&self.lambda_pp);
        f(&self.lambda_pc);
        f(&self.lambda_cp);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.color_key.visit_mut(f);
        self.color_query.visit_mut(f);
        self.color_value.visit_mut(f);
        self.geom_key.visit_mut(f);
        self.geom_query.visit_mut(f);
        self.geom_value.visit_mut(f);
        f(&mut self.lambda_cc);
        f(&mut self.lambda_pp);
        f(&mut self.lambda_pc);
        f(&mut self.lambda_cp);
    }
}

/// Intermediate values of one correlation stage, kept for the backward pass.
#[derive(Clone, Debug)]
struct StageCache {
    stage: Stage,
    input: FeaturePair,
    color_query: Matrix,
    color_key: Matrix,
    color_value: Matrix,
    geom_query: Matrix,
    geom_key: Matrix,
    geom_value: Matrix,
    color_attn: Matrix,
    geom_attn: Matrix,
}

/// Row-stochastic color and geometry attention maps.
pub fn attention_maps(pair: &FeaturePair, params: &CorrelationParams) -> Result<(Matrix, Matrix)> {
    params.check(pair)?;
    let cq = params.color_query.forward(&pair.color)?;
    let ck = params.color_key.forward(&pair.color)?;
    let pq = params.geom_query.forward(&pair.geometry)?;
    let pk = params.geom_key.forward(&pair.geometry)?;
    Ok((
        row_softmax(&matmul_a_bt(&cq, &ck)?)?,
        row_softmax(&matmul_a_bt(&pq, &pk)?)?,
    ))
}

fn stage_forward(
    pair: &FeaturePair,
    params: &CorrelationParams,
    stage: Stage,
) -> Result<(FeaturePair, StageCache)> {
    params.check(pair)?;
    let (c, p) = (&pair.color, &pair.geometry);
    let color_query = params.color_query.forward(c)?;
    let color_key = params.color_key.forward(c)?;
    let color_value = params.color_value.forward(c)?;
    let geom_query = params.geom_query.forward(p)?;
    let geom_key = params.geom_key.forward(p)?;
    let geom_value = params.geom_value.forward(p)?;
    let color_attn = row_softmax(&matmul_a_bt(&color_query, &color_key)?)?;
    let geom_attn = row_softmax(&matmul_a_bt(&geom_query, &geom_key)?)?;

    let mut color_out = c.clone();
    let mut geom_out = p.clone();
    if stage.intra {
        color_out.add_scaled(&matmul(&color_attn, &color_value)?, params.lambda_cc.get());
        geom_out.add_scaled(&matmul(&geom_attn, &geom_value)?, params.lambda_pp.get());
    }
    if stage.inter {
        color_out.add_scaled(&matmul(&geom_attn, &color_value)?, params.lambda_pc.get());
        geom_out.add_scaled(&matmul(&color_attn, &geom_value)?, params.lambda_cp.get());
    }
    let cache = StageCache {
        stage,
        input: pair.clone(),
        color_query,
        color_key,
        color_value,
        geom_query,
        geom_key,
        geom_value,
        color_attn,
        geom_attn,
    };
    Ok((
        FeaturePair {
            color: color_out,
            geometry: geom_out,
        },
        cache,
    ))
}

/// Backward through one stage; accumulates parameter gradients and returns
/// the gradient with respect to the stage input.
fn stage_backward(
    cache: &StageCache,
    params: &mut CorrelationParams,
    g_color: &Matrix,
    g_geom: &Matrix,
) -> Result<FeaturePair> {
    let n = cache.input.len();
    let d = params.dim();
    let mut g_color_attn = Matrix::zeros(n, n);
    let mut g_geom_attn = Matrix::zeros(n, n);
    let mut g_color_value = Matrix::zeros(n, d);
    let mut g_geom_value = Matrix::zeros(n, d);

    // Each residual term T = A·V scaled by λ contributes
    // dλ = <G, T>, dA = λ G Vᵀ, dV = λ Aᵀ G.
    let term = |attn: &Matrix,
                    value: &Matrix,
                    lambda: &mut Param,
                    g_out: &Matrix,
                    g_attn: &mut Matrix,
                    g_value: &mut Matrix|
     -> Result<()> {
        let t = matmul(attn, value)?;
        lambda.grad[(0, 0)] += t.dot(g_out);
        let l = lambda.get();
        g_attn.add_scaled(&matmul_a_bt(g_out, value)?, l);
        g_value.add_scaled(&matmul_at_b(attn, g_out)?, l);
        Ok(())
    };
    if cache.stage.intra {
        term(
            &cache.color_attn,
            &cache.color_value,
            &mut params.lambda_cc,
            g_color,
            &mut g_color_attn,
            &mut g_color_value,
        )?;
        term(
            &cache.geom_attn,
            &cache.geom_value,
            &mut params.lambda_pp,
            g_geom,
            &mut g_geom_attn,
            &mut g_geom_value,
        )?;
    }
    if cache.stage.inter {
        term(
            &cache.geom_attn,
            &cache.color_value,
            &mut params.lambda_pc,
            g_color,
            &mut g_geom_attn,
            &mut g_color_value,
        )?;
        term(
            &cache.color_attn,
            &cache.geom_value,
            &mut params.lambda_cp,
            g_geom,
            &mut g_color_attn,
            &mut g_geom_value,
        )?;
    }

    let g_color_scores = row_softmax_backward(&cache.color_attn, &g_color_attn);
    let g_geom_scores = row_softmax_backward(&cache.geom_attn, &g_geom_attn);
    // S = Q Kᵀ: dQ = dS K, dK = dSᵀ Q.
    let g_cq = matmul(&g_color_scores, &cache.color_key)?;
    let g_ck = matmul_at_b(&g_color_scores, &cache.color_query)?;
    let g_pq = matmul(&g_geom_scores, &cache.geom_key)?;
    let g_pk = matmul_at_b(&g_geom_scores, &cache.geom_query)?;

    let (c, p) = (&cache.input.color, &cache.input.geometry);
    let mut gc = g_color.clone();
    gc.add_assign(&params.color_query.backward(c, &g_cq)?);
    gc.add_assign(&params.color_key.backward(c, &g_ck)?);
    gc.add_assign(&params.color_value.backward(c, &g_color_value)?);
    let mut gp = g_geom.clone();
    gp.add_assign(&params.geom_query.backward(p, &g_pq)?);
    gp.add_assign(&params.geom_key.backward(p, &g_pk)?);
    gp.add_assign(&params.geom_value.backward(p, &g_geom_value)?);
    Ok(FeaturePair {
        color: gc,
        geometry: gp,
    })
}

/// `(C + λ_CC·C_A·C_V, P + λ_PP·P_A·P_V)`.
pub fn intra_mcm(pair: &FeaturePair, params: &CorrelationParams) -> Result<FeaturePair> {
    Ok(stage_forward(pair, params, Stage { intra: true, inter: false })?.0)
}

/// `(C + λ_PC·P_A·C_V, P + λ_CP·C_A·P_V)`.
pub fn inter_mcm(pair: &FeaturePair, params: &CorrelationParams) -> Result<FeaturePair> {
    Ok(stage_forward(pair, params, Stage { intra: false, inter: true })?.0)
}

/// Everything needed to backpropagate through [`fuse_forward`].
#[derive(Clone, Debug)]
pub struct FuseCache {
    stages: Vec<StageCache>,
    color_width: usize,
}

impl FuseCache {
    /// Attention maps of every stage, in application order.
    pub fn attention_maps(&self) -> impl Iterator<Item = (&Matrix, &Matrix)> {
        self.stages.iter().map(|s| (&s.color_attn, &s.geom_attn))
    }
}

/// Fused per-point features of width `d_rgb + d_dep`.
pub fn fuse(pair: &FeaturePair, params: &CorrelationParams, strategy: FusionStrategy) -> Result<Matrix> {
    Ok(fuse_forward(pair, params, strategy)?.0)
}

pub fn fuse_forward(
    pair: &FeaturePair,
    params: &CorrelationParams,
    strategy: FusionStrategy,
) -> Result<(Matrix, FuseCache)> {
    let mut current = pair.clone();
    let mut stages = Vec::new();
    for &stage in strategy.stages() {
        let (next, cache) = stage_forward(&current, params, stage)?;
        stages.push(cache);
        current = next;
    }
    Ok((
        current.concat(),
        FuseCache {
            stages,
            color_width: pair.color.cols(),
        },
    ))
}

/// Maps the gradient of the fused features back to the input pair.
pub fn fuse_backward(
    cache: &FuseCache,
    params: &mut CorrelationParams,
    g_fused: &Matrix,
) -> Result<FeaturePair> {
    let (mut gc, mut gp) = g_fused.split_cols(cache.color_width);
    for stage in cache.stages.iter().rev() {
        let g = stage_backward(stage, params, &gc, &gp)?;
        gc = g.color;
        gp = g.geometry;
    }
    Ok(FeaturePair {
        color: gc,
        geometry: gp,
    })
}
