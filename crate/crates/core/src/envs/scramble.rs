//! Action-label scrambling: the corrupted internal dynamics of the grid users.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::DeterministicTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrambleMode {
    Global,
    Local,
}

/// `perm[s][a]` is the real action the user believes button `a` performs
/// at state `s`. Global maps hold one permutation shared by every state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScrambleMap {
    pub mode: ScrambleMode,
    pub perms: Vec<[usize; 4]>,
    pub seed: u64,
}

const IDENTITY: [usize; 4] = [0, 1, 2, 3];

impl ScrambleMap {
    pub fn identity(state_count: usize) -> Self {
        Self {
            mode: ScrambleMode::Local,
            perms: vec![IDENTITY; state_count],
            seed: 0,
        }
    }

    pub fn global(perm: [usize; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for p in perm {
            if p >= 4 || seen[p] {
                return Err(invalid(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(Self {
            mode: ScrambleMode::Global,
            perms: vec![perm],
            seed: 0,
        })
    }

    pub fn perm(&self, s: usize) -> &[usize; 4] {
        match self.mode {
            ScrambleMode::Global => &self.perms[0],
            ScrambleMode::Local => &self.perms[s],
        }
    }

    pub fn believed_action(&self, s: usize, a: usize) -> usize {
        self.perm(s)[a]
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = [0; 4];
                for (a, &b) in p.iter().enumerate() {
                    inv[b] = a;
                }
                inv
            })
            .collect();
        Self {
            mode: self.mode,
            perms,
            seed: self.seed,
        }
    }
}

/// Draws a scramble. Global mode never returns the identity permutation;
/// local mode draws an independent permutation for each of `state_count`
/// states.
pub fn make_scramble(mode: ScrambleMode, seed: u64, state_count: usize) -> ScrambleMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let mut p = IDENTITY;
        p.shuffle(rng);
        p
    };
    let perms = match mode {
        ScrambleMode::Global => loop {
            let p = draw(&mut rng);
            if p != IDENTITY {
                break vec![p];
            }
        },
        ScrambleMode::Local => (0..state_count).map(|_| draw(&mut rng)).collect(),
    };
    ScrambleMap { mode, perms, seed }
}

/// `T_int(s'|s,a) = T_real(s'|s, perm_s(a))`.
pub fn scrambled_dynamics(real: &DeterministicTable, map: &ScrambleMap) -> Result<DeterministicTable> {
    if map.mode == ScrambleMode::Local && map.perms.len() < real.source_count {
        return Err(invalid("local scramble does not cover every state"));
    }
    let next = (0..real.source_count)
        .flat_map(|s| (0..real.action_count).map(move |a| (s, a)))
        .map(|(s, a)| real.next_state(s, map.believed_action(s, a)))
        .collect();
    DeterministicTable::new(real.source_count, real.state_count, real.action_count, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridWorld;

    #[test]
    fn identity_map_keeps_real_dynamics() {
        let g = GridWorld::default();
        let real = g.real_table();
        assert_eq!(scrambled_dynamics(&real, &ScrambleMap::identity(49)).unwrap(), real);
    }

    #[test]
    fn left_believed_to_move_down() {
        let g = GridWorld::default();
        let real = g.real_table();
        // button left (2) performs down (1), and vice versa
        let map = ScrambleMap::global([0, 2, 1, 3]).unwrap();
        let internal = scrambled_dynamics(&real, &map).unwrap();
        for s in 0..49 {
            assert_eq!(internal.next_state(s, 2), real.next_state(s, 1));
            assert_eq!(internal.next_state(s, 1), real.next_state(s, 2));
        }
    }

    #[test]
    fn inverse_scramble_recovers_real() {
        let g = GridWorld::default();
        let real = g.real_table();
        for mode in [ScrambleMode::Global, ScrambleMode::Local] {
            let map = make_scramble(mode, 11, 49);
            let once = scrambled_dynamics(&real, &map).unwrap();
            assert_eq!(scrambled_dynamics(&once, &map.inverse()).unwrap(), real);
        }
    }

    #[test]
    fn global_scramble_is_never_identity() {
        for seed in 0..200 {
            let map = make_scramble(ScrambleMode::Global, seed, 49);
            assert_eq!(map.perms.len(), 1);
            assert_ne!(map.perms[0], IDENTITY);
        }
    }

    #[test]
    fn local_scramble_varies_between_states() {
        let map = make_scramble(ScrambleMode::Local, 3, 49);
        assert_eq!(map.perms.len(), 49);
        assert!(map.perms.iter().any(|p| p != &map.perms[0]));
    }

    #[test]
    fn non_permutations_are_rejected() {
        assert!(ScrambleMap::global([0, 0, 1, 2]).is_err());
    }
}
