//! Primary voltage control and consensus-based secondary control.

use nalgebra::{RowVector3, Vector3};

use crate::error::{Error, Result};
use crate::num::Real;

/// Consensus weight shared by every DGU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsensusConfig<T: Real> {
    pub k_i: T,
}

impl<T: Real> ConsensusConfig<T> {
    pub fn new(k_i: T) -> Result<Self> {
        if k_i > T::zero() && k_i.is_finite() {
            Ok(Self { k_i })
        } else {
            Err(Error::Config(
                "consensus weight k_I must be positive".into(),
            ))
        }
    }
}

/// `u = K y`.
pub fn primary_input<T: Real>(y: &Vector3<T>, k: &RowVector3<T>) -> T {
    (k * y)[0]
}

/// One neighbour's contribution to the consensus law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborReport<T: Real> {
    /// Decoded measurement `y_hat_j`, or `None` when nothing arrived.
    pub y: Option<Vector3<T>>,
    /// Neighbour current rating `I_t^s_j`.
    pub rating: T,
    /// Set once this neighbour's link has raised an alarm; the term is then
    /// held at zero.
    pub frozen: bool,
}

/// `alpha' = -sum_j k_I (I_t / I_t^s - I_t,j / I_t^s_j)` over the terminal
/// current component.
pub fn consensus_rate<T: Real>(
    own_y: &Vector3<T>,
    own_rating: T,
    neighbors: &[NeighborReport<T>],
    cfg: &ConsensusConfig<T>,
) -> Result<T> {
    let own = own_y[1] / own_rating;
    let mut rate = T::zero();
    for (idx, n) in neighbors.iter().enumerate() {
        if n.frozen {
            continue;
        }
        let y = n.y.ok_or_else(|| {
            Error::Simulation(format!(
                "no decoded measurement from active neighbour #{idx}"
            ))
        })?;
        rate -= cfg.k_i * (own - y[1] / n.rating);
    }
    Ok(rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: f64) -> ConsensusConfig<f64> {
        ConsensusConfig::new(k).unwrap()
    }

    #[test]
    fn primary_projection() {
        let y = Vector3::new(48.0, 5.0, 0.1);
        assert_eq!(
            primary_input(&Vector3::zeros(), &RowVector3::new(1.0, 2.0, 3.0)),
            0.0
        );
        assert_eq!(primary_input(&y, &RowVector3::new(1.0, 0.0, 0.0)), 48.0);
    }

    #[test]
    fn primary_noise_sensitivity_bounded() {
        let k = RowVector3::<f64>::new(-0.86, -1.96, 237.6);
        let x = Vector3::new(48.0, 5.0, 0.43);
        let rho_bar = Vector3::repeat(0.01);
        let bound = (k.abs() * rho_bar)[0];
        for s in [-1.0, -0.3, 0.7, 1.0] {
            let rho = Vector3::new(0.01 * s, -0.01 * s, 0.01);
            let du = primary_input(&(x + rho), &k) - primary_input(&x, &k);
            assert!(du.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn equal_ratios_no_drift() {
        let own = Vector3::new(48.0, 6.0, 0.0);
        let n = [NeighborReport {
            y: Some(Vector3::new(47.9, 3.0, 0.0)),
            rating: 3.0,
            frozen: false,
        }];
        assert_eq!(consensus_rate(&own, 6.0, &n, &cfg(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn single_neighbour_rate() {
        // own ratio 1.0, neighbour ratio 1.2, k_I = 1 -> -(1.0 - 1.2) = 0.2
        let own = Vector3::new(48.0, 5.0, 0.0);
        let n = [NeighborReport {
            y: Some(Vector3::new(48.0, 6.0, 0.0)),
            rating: 5.0,
            frozen: false,
        }];
        let r = consensus_rate(&own, 5.0, &n, &cfg(1.0)).unwrap();
        assert!((r - 0.2).abs() < 1e-15);
    }

    #[test]
    fn no_neighbours_no_drift() {
        assert_eq!(
            consensus_rate(&Vector3::new(48.0, 5.0, 0.0), 5.0, &[], &cfg(2.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn missing_measurement_is_fault_unless_frozen() {
        let mut n = [NeighborReport {
            y: None,
            rating: 5.0,
            frozen: false,
        }];
        let own = Vector3::new(48.0, 5.0, 0.0);
        assert!(matches!(
            consensus_rate(&own, 5.0, &n, &cfg(1.0)),
            Err(Error::Simulation(_))
        ));
        n[0].frozen = true;
        assert_eq!(consensus_rate(&own, 5.0, &n, &cfg(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_positive_weight() {
        assert!(ConsensusConfig::new(0.0).is_err());
        assert!(ConsensusConfig::new(-1.0).is_err());
    }
}
