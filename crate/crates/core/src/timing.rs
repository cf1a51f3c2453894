use std::time::Instant;

use serde::{Deserialize, Serialize};

/// How elapsed times are recorded in reports and traces. `Frozen` records
/// zero everywhere so traces from deterministic backends are byte-stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    Wall,
    Frozen,
}

impl Timing {
    pub fn start(self) -> Stopwatch {
        Stopwatch {
            started: Instant::now(),
            timing: self,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    started: Instant,
    timing: Timing,
}

impl Stopwatch {
    pub fn elapsed_ms(&self) -> u64 {
        match self.timing {
            Timing::Wall => self.started.elapsed().as_millis() as u64,
            Timing::Frozen => 0,
        }
    }
}
