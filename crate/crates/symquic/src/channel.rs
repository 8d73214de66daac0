//! The adversarial network between the two endpoints.
//!
//! Every transmit passes through here and receives a verdict:
//! delivered or dropped. With symbolic drops enabled, each verdict up
//! to the drop budget is a genuine two-way fork, so exploration covers
//! every loss pattern within the budget. Prefix mutation replaces the
//! first bytes of every payload with fresh symbolic variables before
//! sealing, turning each into all 256 values at once.
//!
//! The channel's bookkeeping also defines *interference*: whether this
//! path dropped or rewrote anything. Oracles weaken their verdict on
//! interference paths, since asymmetric endings are legitimate when
//! the network ate packets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::explore::{DropDecision, Interrupt, StepCtx};
use crate::netmodel::PayloadByte;
use crate::symval::SymVarId;

/// Choice site for delivery verdicts.
pub const VERDICT_SITE: &str = "channel.verdict";

/// Largest allowed mutation prefix, bounding path explosion.
pub const MAX_MOD_PREFIX: usize = 32;

/// How the channel rules on packet delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// Every packet is delivered; verdicts are single-option.
    Off,
    /// Delivery forks against loss until `max_drops` packets have
    /// been dropped on the path.
    Symbolic { max_drops: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub drop_mode: DropMode,
    /// Number of leading payload bytes replaced with fresh symbolic
    /// variables on every transmit. Zero disables mutation.
    pub mod_prefix: usize,
}

impl ChannelConfig {
    pub fn passive() -> Self {
        ChannelConfig { drop_mode: DropMode::Off, mod_prefix: 0 }
    }
}

/// Where one mutation variable landed: which transmit, which byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationSite {
    pub transmit_index: u64,
    pub position: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelState {
    config: ChannelConfig,
    drops_taken: u32,
    mutations: BTreeMap<SymVarId, MutationSite>,
}

impl ChannelState {
    /// Panics if `mod_prefix` exceeds [`MAX_MOD_PREFIX`]; the bound is
    /// part of the configuration contract, not a data error.
    pub fn new(config: ChannelConfig) -> Self {
        assert!(
            config.mod_prefix <= MAX_MOD_PREFIX,
            "mod_prefix {} exceeds the limit of {MAX_MOD_PREFIX}",
            config.mod_prefix
        );
        ChannelState { config, drops_taken: 0, mutations: BTreeMap::new() }
    }

    pub fn config(&self) -> ChannelConfig {
        self.config
    }

    /// Replace the first `mod_prefix` bytes of a plaintext payload
    /// with fresh symbolic variables. Returns the variables created
    /// and their byte positions; the caller binds them to a transmit
    /// index via [`Self::note_mutation`] once the packet is stamped.
    pub fn mutate_prefix(
        &mut self,
        ctx: &mut StepCtx<'_>,
        payload: &mut [PayloadByte],
    ) -> Result<Vec<(SymVarId, usize)>, Interrupt> {
        let k = self.config.mod_prefix.min(payload.len());
        let mut created = Vec::with_capacity(k);
        for (position, byte) in payload.iter_mut().enumerate().take(k) {
            let var = ctx.fresh_byte()?;
            *byte = PayloadByte::Symbolic(var);
            created.push((var, position));
        }
        Ok(created)
    }

    /// Record where mutation variables ended up, keyed by the
    /// transmit index the socket layer stamped.
    pub fn note_mutation(&mut self, transmit_index: u64, vars: &[(SymVarId, usize)]) {
        for &(var, position) in vars {
            let previous =
                self.mutations.insert(var, MutationSite { transmit_index, position });
            assert!(previous.is_none(), "{var} was already mapped to a mutation site");
        }
    }

    /// Rule on one transmit. Forks only while the drop budget lasts;
    /// afterwards (and always under [`DropMode::Off`]) the verdict is
    /// a single-option choice, recorded but never forking.
    pub fn verdict(
        &mut self,
        ctx: &mut StepCtx<'_>,
        transmit_index: u64,
    ) -> Result<DropDecision, Interrupt> {
        let can_drop = match self.config.drop_mode {
            DropMode::Off => false,
            DropMode::Symbolic { max_drops } => self.drops_taken < max_drops,
        };
        let decision = ctx.drop_decision(VERDICT_SITE, transmit_index, can_drop)?;
        if decision == DropDecision::Dropped {
            self.drops_taken += 1;
        }
        Ok(decision)
    }

    pub fn drops_taken(&self) -> u32 {
        self.drops_taken
    }

    pub fn mutations(&self) -> &BTreeMap<SymVarId, MutationSite> {
        &self.mutations
    }

    /// Whether this path saw any channel interference. Oracles use
    /// this to decide between the strict and the weakened compatibility
    /// check.
    pub fn interference(&self) -> bool {
        self.drops_taken > 0 || !self.mutations.is_empty()
    }

    pub fn choice_sites(&self) -> Vec<&'static str> {
        vec![VERDICT_SITE]
    }
}
