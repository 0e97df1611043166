//! Pseudo-Siamese toy encoder: per-view copies of three stride-2 conv stages
//! followed by separate detail (`F`) and semantic (`S`) heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::LevelSchedule;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Ground,
    Aerial,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Ground => "ground",
            Branch::Aerial => "aerial",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.w"), &[3, 3, cin, cout], 9 * cin, 1.4, rng);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvBlock { weight, bias, stride }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, act: bool) -> Result<Var> {
        let k = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.conv2d(x, k, self.stride, 1)?;
        let y = tape.channel_bias(y, b)?;
        if act { tape.gelu(y) } else { Ok(y) }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// One view's parameters. The two heads never share weights.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub stages: Vec<ConvBlock>,
    pub f_head: ConvBlock,
    pub s_head: ConvBlock,
}

impl BranchParams {
    pub fn stage_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.ids()).collect()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.stage_ids();
        v.extend(self.f_head.ids());
        v.extend(self.s_head.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct ToyEncoderParams {
    pub ground: BranchParams,
    pub aerial: BranchParams,
    pub in_channels: usize,
    /// Output channels of each stride-2 stage, finest first.
    pub stage_channels: Vec<usize>,
    pub semantic_channels: usize,
}

impl ToyEncoderParams {
    /// Stage widths mirror the schedule: stage `i` feeds the skip of level
    /// `n - 1 - i` and the detail head emits the level-0 width.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        schedule: &LevelSchedule,
        semantic_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let stage_channels: Vec<usize> = schedule.channels.iter().rev().copied().collect();
        let c0 = schedule.channels[0];
        let mut branch = |view: Branch, rng: &mut _| {
            let mut cin = in_channels;
            let mut stages = Vec::new();
            for (i, &c) in stage_channels.iter().enumerate() {
                stages.push(ConvBlock::new(store, &format!("{prefix}.{}.stage{i}", view.name()), cin, c, 2, rng));
                cin = c;
            }
            let f_head = ConvBlock::new(store, &format!("{prefix}.{}.f_head", view.name()), cin, c0, 1, rng);
            let s_head =
                ConvBlock::new(store, &format!("{prefix}.{}.s_head", view.name()), cin, semantic_channels, 1, rng);
            BranchParams { stages, f_head, s_head }
        };
        let ground = branch(Branch::Ground, rng);
        let aerial = branch(Branch::Aerial, rng);
        ToyEncoderParams { ground, aerial, in_channels, stage_channels, semantic_channels }
    }

    pub fn branch(&self, b: Branch) -> &BranchParams {
        match b {
            Branch::Ground => &self.ground,
            Branch::Aerial => &self.aerial,
        }
    }
}

/// Encoder outputs for one image.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Detail map `F^0`.
    pub f0: Var,
    /// Stage outputs below the last one, coarsest first; these are the
    /// decoder skips for levels `1..n`.
    pub skips: Vec<Var>,
    /// Semantic map `G`.
    pub g: Var,
}

pub fn toy_encode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ToyEncoderParams,
    branch: Branch,
    image: Var,
) -> Result<Encoded> {
    let &[h, w, c] = tape.shape(image) else {
        return Err(Error::dim(format!("image must be H x W x C, got {:?}", tape.shape(image))));
    };
    let down = 1usize << params.stage_channels.len();
    if c != params.in_channels || h % down != 0 || w % down != 0 {
        return Err(Error::dim(format!(
            "{} image {h}x{w}x{c} needs {} channels and sides divisible by {down}",
            branch.name(),
            params.in_channels
        )));
    }
    let bp = params.branch(branch);
    let mut x = image;
    let mut outs = Vec::with_capacity(bp.stages.len());
    for s in &bp.stages {
        x = s.apply(tape, store, x, true)?;
        outs.push(x);
    }
    let f0 = bp.f_head.apply(tape, store, x, false)?;
    let g = bp.s_head.apply(tape, store, x, true)?;
    outs.pop();
    outs.reverse();
    Ok(Encoded { f0, skips: outs, g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::probe;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, ToyEncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ToyEncoderParams::new(&mut store, "enc", 12, &LevelSchedule::desk(), 32, &mut rng);
        (store, p)
    }

    #[test]
    fn aerial_pyramid_halves_per_stage() {
        let (store, p) = setup();
        let mut tape = Tape::new();
        let x = tape.constant(probe(&[96, 96, 12], 1)).unwrap();
        let e = toy_encode(&mut tape, &store, &p, Branch::Aerial, x).unwrap();
        assert_eq!(tape.shape(e.f0), [12, 12, 32]);
        assert_eq!(tape.shape(e.g), [12, 12, 32]);
        assert_eq!(tape.shape(e.skips[0]), [24, 24, 16]);
        assert_eq!(tape.shape(e.skips[1]), [48, 48, 8]);
    }

    #[test]
    fn ground_map_is_four_by_eight() {
        let (store, p) = setup();
        let mut tape = Tape::new();
        let x = tape.constant(probe(&[32, 64, 12], 2)).unwrap();
        let e = toy_encode(&mut tape, &store, &p, Branch::Ground, x).unwrap();
        assert_eq!(tape.shape(e.f0), [4, 8, 32]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (store, p) = setup();
        let mut tape = Tape::new();
        let x = tape.constant(probe(&[96, 96, 4], 1)).unwrap();
        assert!(toy_encode(&mut tape, &store, &p, Branch::Aerial, x).is_err());
    }

    #[test]
    fn heads_have_distinct_parameters() {
        let (_, p) = setup();
        for b in [&p.ground, &p.aerial] {
            assert_ne!(b.f_head.weight, b.s_head.weight);
        }
        let g: std::collections::HashSet<_> = p.ground.ids().into_iter().collect();
        assert!(p.aerial.ids().iter().all(|id| !g.contains(id)));
    }
}
