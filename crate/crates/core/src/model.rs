//! The full parameter bundle and its forward passes, on a tape for training
//! and tape-free wrappers for inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::decoder::{self, DecoderParams, LevelSchedule, LocalizationDistribution};
use crate::encoder::{toy_encode, Branch, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::losses::Temperature;
use crate::param::{ParamId, ParamStore};
use crate::representation::{
    global_descriptor, project_ground, AggregatorParams, GlobalDescriptor, Pooling, ProjectorParams, GEM_P_RANGE,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Temperatures of the three contrastive terms. With a shared temperature all
/// three point at the same parameter.
#[derive(Clone, Copy, Debug)]
pub struct Temperatures {
    pub retrieval: Temperature,
    pub matching: Temperature,
    pub rerank: Temperature,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: ToyEncoderParams,
    pub agg_ground: AggregatorParams,
    pub agg_aerial: AggregatorParams,
    pub projector: ProjectorParams,
    pub decoder: DecoderParams,
    pub tau: Temperatures,
    pub pooling: Pooling,
}

/// Backbone outputs for one aerial tile.
#[derive(Clone, Debug, PartialEq)]
pub struct AerialFeatures {
    pub f0: Tensor,
    /// Skip maps for levels `1..n`, coarsest first.
    pub skips: Vec<Tensor>,
    pub g: Tensor,
}

impl AerialFeatures {
    /// `F_a^0` followed by the skips, the decoder's pyramid order.
    pub fn pyramid(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.f0).chain(&self.skips)
    }
}

/// Backbone outputs for one ground panorama.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundFeatures {
    pub f0: Tensor,
    pub g: Tensor,
}

#[derive(Clone, Debug)]
pub struct AerialVars {
    pub f0: Var,
    pub skips: Vec<Var>,
    pub g: Var,
}

impl AerialVars {
    pub fn pyramid(&self) -> Vec<Var> {
        std::iter::once(self.f0).chain(self.skips.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroundVars {
    pub f0: Var,
    pub g: Var,
}

/// Heads applied to one query: its global descriptor and one unit-norm
/// detailed descriptor per level.
#[derive(Clone, Debug)]
pub struct GroundHeads {
    pub descriptor: GlobalDescriptor,
    pub detail: Vec<Tensor>,
}

impl Model {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6465_6c00);
        let mut store = ParamStore::new();
        let m = &cfg.model;
        let f = &cfg.fixture;
        let encoder =
            ToyEncoderParams::new(&mut store, "enc", f.channels(), &m.schedule, m.semantic_channels, &mut rng);
        let agg_ground = AggregatorParams::new(&mut store, "agg.ground", m.semantic_channels, &mut rng);
        let agg_aerial = AggregatorParams::new(&mut store, "agg.aerial", m.semantic_channels, &mut rng);
        let down = 1usize << m.schedule.levels();
        let projector = ProjectorParams::new(
            &mut store,
            "proj",
            f.ground_height / down,
            f.ground_width / down,
            m.schedule.channels[0],
            &m.schedule.channels,
            &mut rng,
        )?;
        let decoder = DecoderParams::new(&mut store, "dec", m.schedule.clone(), m.fuse_kernel, &mut rng)?;
        let tau0 = cfg.loss.tau_init;
        let tau = if cfg.loss.shared_temperature {
            let t = Temperature::new(&mut store, "tau", tau0)?;
            Temperatures { retrieval: t, matching: t, rerank: t }
        } else {
            Temperatures {
                retrieval: Temperature::new(&mut store, "tau.retrieval", tau0)?,
                matching: Temperature::new(&mut store, "tau.matching", tau0)?,
                rerank: Temperature::new(&mut store, "tau.rerank", tau0)?,
            }
        };
        Ok(Model { store, encoder, agg_ground, agg_aerial, projector, decoder, tau, pooling: m.pooling })
    }

    pub fn schedule(&self) -> &LevelSchedule {
        &self.decoder.schedule
    }

    pub fn gem_p_ids(&self) -> [ParamId; 2] {
        [self.agg_ground.p, self.agg_aerial.p]
    }

    /// Keep the GeM powers inside their admissible range after an update.
    pub fn clamp_gem(&mut self) {
        for id in self.gem_p_ids() {
            let v = self.store.value_mut(id);
            let p = v.data()[0].clamp(GEM_P_RANGE.0, GEM_P_RANGE.1);
            v.data_mut()[0] = p;
        }
    }

    // ----- tape passes -----

    pub fn encode_aerial_vars(&self, tape: &mut Tape, image: Var) -> Result<AerialVars> {
        let e = toy_encode(tape, &self.store, &self.encoder, Branch::Aerial, image)?;
        Ok(AerialVars { f0: e.f0, skips: e.skips, g: e.g })
    }

    pub fn encode_ground_vars(&self, tape: &mut Tape, image: Var) -> Result<GroundVars> {
        let e = toy_encode(tape, &self.store, &self.encoder, Branch::Ground, image)?;
        Ok(GroundVars { f0: e.f0, g: e.g })
    }

    pub fn descriptor_var(&self, tape: &mut Tape, branch: Branch, g: Var) -> Result<Var> {
        let agg = match branch {
            Branch::Ground => &self.agg_ground,
            Branch::Aerial => &self.agg_aerial,
        };
        global_descriptor(tape, &self.store, g, agg, self.pooling)
    }

    pub fn project_vars(&self, tape: &mut Tape, f0: Var) -> Result<Vec<Var>> {
        (0..self.schedule().levels())
            .map(|l| project_ground(tape, &self.store, f0, l, &self.projector).map(|p| p.var))
            .collect()
    }

    // ----- inference -----

    pub fn encode_aerial(&self, image: &Tensor) -> Result<AerialFeatures> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone())?;
        let v = self.encode_aerial_vars(&mut tape, x)?;
        Ok(AerialFeatures {
            f0: tape.value(v.f0).clone(),
            skips: v.skips.iter().map(|&s| tape.value(s).clone()).collect(),
            g: tape.value(v.g).clone(),
        })
    }

    pub fn encode_ground(&self, image: &Tensor) -> Result<GroundFeatures> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone())?;
        let v = self.encode_ground_vars(&mut tape, x)?;
        Ok(GroundFeatures { f0: tape.value(v.f0).clone(), g: tape.value(v.g).clone() })
    }

    pub fn aerial_descriptor(&self, f: &AerialFeatures) -> Result<GlobalDescriptor> {
        let mut tape = Tape::new();
        let g = tape.constant(f.g.clone())?;
        let d = self.descriptor_var(&mut tape, Branch::Aerial, g)?;
        GlobalDescriptor::new(tape.value(d).clone())
    }

    pub fn ground_heads(&self, f: &GroundFeatures) -> Result<GroundHeads> {
        let mut tape = Tape::new();
        let g = tape.constant(f.g.clone())?;
        let d = self.descriptor_var(&mut tape, Branch::Ground, g)?;
        let f0 = tape.constant(f.f0.clone())?;
        let detail = self.project_vars(&mut tape, f0)?;
        Ok(GroundHeads {
            descriptor: GlobalDescriptor::new(tape.value(d).clone())?,
            detail: detail.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Level-0 score map `M^0` of a query's level-0 descriptor against a tile.
    pub fn level0_scores(&self, detail0: &Tensor, f0: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(detail0.clone())?;
        let fa = tape.constant(f0.clone())?;
        let (m, _) = decoder::match_level(&mut tape, f, fa)?;
        Ok(tape.value(m).clone())
    }

    pub fn localize(
        &self,
        detail: &[Tensor],
        aerial: &AerialFeatures,
        m0: Option<&Tensor>,
    ) -> Result<LocalizationDistribution> {
        if detail.len() != self.schedule().levels() {
            return Err(Error::dim(format!(
                "{} detailed descriptors for {} levels",
                detail.len(),
                self.schedule().levels()
            )));
        }
        let mut tape = Tape::new();
        let ground = detail.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let pyramid = aerial.pyramid().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let m0 = m0.map(|t| tape.constant(t.clone())).transpose()?;
        let trace = decoder::decode(&mut tape, &self.store, &self.decoder, &ground, &pyramid, m0)?;
        LocalizationDistribution::new(tape.value(trace.dist).clone())
    }
}
