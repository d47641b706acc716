//! Monte Carlo estimate of guessing the randomized gadget.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::MonitorConfig;
use crate::formal_state::MachineState;
use crate::nexpoline::{self, GateMechanism, GateVariant};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub pages: u64,
    pub freq: u64,
    pub trials: u64,
    pub hits: u64,
    pub empirical_rate: f64,
    /// The closed form `2 * freq / (4096 * pages)`.
    pub formula_rate: f64,
    /// Exact chance that `freq` uniform guesses hit at least once.
    pub window_rate: f64,
    pub seed: u64,
}

impl MonteCarloResult {
    pub fn formula_exact(&self) -> Ratio<u64> {
        nexpoline::guess_probability(self.pages, self.freq)
    }
}

const CHUNK: u64 = 8192;

fn chunk_hits(pages: u64, freq: u64, trials: u64, seed: u64) -> u64 {
    let gate = GateMechanism {
        variant: GateVariant::Random {
            pages,
            rerand_freq: freq,
        },
        ..GateMechanism::default()
    };
    let mut s = MachineState::with_config(MonitorConfig::with_gate(gate), seed);
    s.start_app();
    let n = nexpoline::gadget_positions(pages);
    let base = s.trampoline.pad_for(0).expect("random trampoline").base;
    let mut hits = 0;
    for _ in 0..trials {
        // One window: the gadget moves, then the attacker gets `freq` tries.
        nexpoline::rerandomize(&mut s);
        for _ in 0..freq {
            let guess = s.rng.below(n);
            if nexpoline::attack_jump(&s, 0, base.add(guess)).is_bypass() {
                hits += 1;
                break;
            }
        }
    }
    hits
}

/// Runs `trials` independent windows. Deterministic in the seed regardless
/// of thread count: every chunk has its own derived seed.
pub fn monte_carlo_guess(pages: u64, freq: u64, trials: u64, seed: u64) -> MonteCarloResult {
    assert!(pages >= 1 && freq >= 1, "pages and freq must be positive");
    let chunks = trials.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK.min(trials - c * CHUNK);
            let chunk_seed = seed ^ c.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            chunk_hits(pages, freq, n, chunk_seed)
        })
        .sum();
    let formula = nexpoline::guess_probability(pages, freq);
    MonteCarloResult {
        pages,
        freq,
        trials,
        hits,
        empirical_rate: if trials == 0 {
            0.0
        } else {
            hits as f64 / trials as f64
        },
        formula_rate: *formula.numer() as f64 / *formula.denom() as f64,
        window_rate: nexpoline::window_hit_probability(pages, freq),
        seed,
    }
}
