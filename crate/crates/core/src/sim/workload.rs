use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SeqLenDist;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: f64,
    pub output_len: u32,
}

/// Poisson arrivals on `[0, duration)` with log-normal output lengths.
///
/// Each node draws from its own stream of the scenario seed, so streams do
/// not depend on the policy or on other nodes.
pub fn generate_arrivals(rate: f64, dist: SeqLenDist, duration: f64, seed: u64, stream: u64) -> Result<Vec<Arrival>> {
    if !(rate >= 0.0) || !(duration > 0.0) {
        return Err(Error::Config("arrival rate must be >= 0 and duration > 0".into()));
    }
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let gap = Exp::new(rate).map_err(|e| Error::Config(format!("arrival rate: {e}")))?;
    // Mean of a log-normal is exp(mu + s^2/2).
    let mu = dist.mean.ln() - dist.spread * dist.spread / 2.0;
    let len = LogNormal::new(mu, dist.spread).map_err(|e| Error::Config(format!("seq_len: {e}")))?;
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= duration {
            break;
        }
        let l: f64 = len.sample(&mut rng);
        out.push(Arrival {
            time: t,
            output_len: l.round().max(1.0) as u32,
        });
    }
    Ok(out)
}

/// Hex SHA-256 of an arrival stream.
pub fn stream_hash(arrivals: &[Arrival]) -> String {
    let mut h = Sha256::new();
    for a in arrivals {
        h.update(a.time.to_bits().to_le_bytes());
        h.update(a.output_len.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
