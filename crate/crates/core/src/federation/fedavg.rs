use super::{FederationError, Result};
use crate::model::ParamVector;

/// Parameters returned by one client for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u16,
    pub params: ParamVector,
    pub num_samples: u64,
}

fn check(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or_else(|| FederationError::Aggregation("no client updates".into()))?;
    for u in updates {
        if u.num_samples == 0 {
            return Err(FederationError::Aggregation(format!("client {} reported zero samples", u.client_id)));
        }
        if u.round != first.round {
            return Err(FederationError::Aggregation(format!(
                "round mismatch: client {} sent round {}, client {} sent round {}",
                first.client_id, first.round, u.client_id, u.round
            )));
        }
        if u.params.layout() != first.params.layout() {
            return Err(FederationError::Aggregation(format!("client {} parameter layout differs", u.client_id)));
        }
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(FederationError::Aggregation(format!("duplicate update from client {}", w[0].client_id)));
    }
    Ok(sorted)
}

/// Sample-weighted mean in `f64`, before narrowing. Clients are visited in
/// ascending id order so the result does not depend on arrival order.
pub fn fedavg_wide(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let sorted = check(updates)?;
    let mut acc = vec![0f64; sorted[0].params.len()];
    let mut total = 0f64;
    for u in sorted {
        let n = u.num_samples as f64;
        total += n;
        for (a, &w) in acc.iter_mut().zip(u.params.values()) {
            *a += n * f64::from(w);
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(acc)
}

pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let wide = fedavg_wide(updates)?;
    let layout = updates[0].params.layout().to_vec();
    let values = wide.into_iter().map(|v| v as f32).collect();
    Ok(ParamVector::from_parts(values, layout))
}
