//! Canned parameter sets and the reference pulse-train excitation, used by
//! the CLI and the evaluation tests as ground truth.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::randles::{randles_simulate, RandlesParams, RandlesState};
use crate::signals::{pulse_train, SampledSignal, SegmentPlan};
use crate::sre::{sre_simulate, SreParams};
use crate::thevenin::{thevenin_from_rc, thevenin_simulate, ObserverMatrix, TheveninState};
use crate::warburg::{normalized_warburg, WarburgRealization};

/// Default excitation: 0.75 A pulses, 10 s on / 10 s off, 8 ms sampling.
pub const PULSE_AMPLITUDE: f64 = 0.75;
pub const PULSE_ON_S: f64 = 10.0;
pub const PULSE_OFF_S: f64 = 10.0;
pub const DEFAULT_TS: f64 = 0.008;
pub const DEFAULT_DURATION_S: f64 = 400.0;

/// The reference pulse train (400 s, 50000 samples at the default rate).
pub fn default_pulse_train(total_s: f64, ts: f64) -> Result<SampledSignal> {
    pulse_train(PULSE_AMPLITUDE, PULSE_ON_S, PULSE_OFF_S, total_s, ts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Randles cell: OCV0 4.166 V, C0 4093.8 F, A_w 0.0047, R_b 0.1205 ohm.
    Mrandles,
    /// One RC pair: OCV0 4.165 V, C0 2439.3 F, R1 0.0153, C1 531.69, R0 0.1206.
    M1,
    /// Two RC pairs: OCV0 4.1633 V, C0 2368.3 F, R1 0.0183, C1 211.17,
    /// R2 0.0063, C2 5.7168, R0 0.1202.
    M2,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mrandles" => Ok(Self::Mrandles),
            "m1" => Ok(Self::M1),
            "m2" => Ok(Self::M2),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset '{other}' (expected mrandles, m1, or m2)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mrandles => "mrandles",
            Self::M1 => "m1",
            Self::M2 => "m2",
        }
    }

    pub fn ocv0(&self) -> f64 {
        match self {
            Self::Mrandles => 4.166,
            Self::M1 => 4.165,
            Self::M2 => 4.1633,
        }
    }

    pub fn c0(&self) -> f64 {
        match self {
            Self::Mrandles => 4093.8,
            Self::M1 => 2439.3,
            Self::M2 => 2368.3,
        }
    }
}

/// Diffusion approximation order used when a preset needs a realization.
pub const PRESET_WARBURG_ORDER: usize = 7;
pub const PRESET_WARBURG_KMAX: usize = 10_000;

pub fn preset_realization(ts: f64) -> Result<WarburgRealization> {
    normalized_warburg(PRESET_WARBURG_ORDER, PRESET_WARBURG_KMAX, ts)
}

/// Simulates a preset as a single segment over the given current, returning
/// the clean terminal voltage.
pub fn simulate_preset(
    preset: Preset,
    current: &SampledSignal,
    realization: Option<&WarburgRealization>,
) -> Result<SampledSignal> {
    let ts = current.ts();
    let plan = SegmentPlan::single(current.len());
    match preset {
        Preset::Mrandles => {
            let real = match realization {
                Some(r) => r.clone(),
                None => preset_realization(ts)?,
            };
            let p = RandlesParams {
                ocv0: Some(4.166),
                xw0_scaled: None,
                inv_c0: 1.0 / 4093.8,
                aw_scaled: ts.sqrt() * 0.0047,
                rb: 0.1205,
            };
            let init = RandlesState {
                ocv: 4.166,
                xw: DVector::zeros(real.order()),
            };
            randles_simulate(&real, std::slice::from_ref(&p), &plan, current, &init)
        }
        Preset::M1 => {
            let obs = ObserverMatrix::from_real(&[0.5])?;
            let p = thevenin_from_rc(&obs, &[(0.0153, 531.69)], 0.1206, 1.0 / 2439.3, 4.165, ts)?;
            let init = TheveninState { ocv: 4.165, x: DVector::zeros(1) };
            thevenin_simulate(&obs, std::slice::from_ref(&p), &plan, current, &init)
        }
        Preset::M2 => {
            let obs = ObserverMatrix::from_real(&[0.4, 0.7])?;
            let p = thevenin_from_rc(
                &obs,
                &[(0.0183, 211.17), (0.0063, 5.7168)],
                0.1202,
                1.0 / 2368.3,
                4.1633,
                ts,
            )?;
            let init = TheveninState { ocv: 4.1633, x: DVector::zeros(2) };
            thevenin_simulate(&obs, std::slice::from_ref(&p), &plan, current, &init)
        }
    }
}

/// SRE view of a preset (OCV source plus series resistance only), used when
/// the simple model is fit to richer data.
pub fn sre_view(preset: Preset, current: &SampledSignal) -> Result<SampledSignal> {
    let plan = SegmentPlan::single(current.len());
    let r0 = match preset {
        Preset::Mrandles => 0.1205,
        Preset::M1 => 0.1206,
        Preset::M2 => 0.1202,
    };
    let p = SreParams {
        ocv0: Some(preset.ocv0()),
        c0: preset.c0(),
        r0,
    };
    sre_simulate(std::slice::from_ref(&p), &plan, current, preset.ocv0())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parse_and_names_roundtrip() {
        for p in [Preset::Mrandles, Preset::M1, Preset::M2] {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(Preset::parse("m3").is_err());
    }

    #[test]
    fn pulse_train_shape() {
        let i = default_pulse_train(DEFAULT_DURATION_S, DEFAULT_TS).unwrap();
        assert_eq!(i.len(), 50_000);
        assert_eq!(i.values()[0], 0.75);
        assert_eq!(i.values()[1249], 0.75);
        assert_eq!(i.values()[1250], 0.0);
    }

    #[test]
    fn m1_first_sample_and_rest_values() {
        let i = default_pulse_train(40.0, DEFAULT_TS).unwrap();
        let v = simulate_preset(Preset::M1, &i, None).unwrap();
        // at k = 0 no dynamic drop has built up: v = OCV0 - R0 I
        assert_relative_eq!(v.values()[0], 4.165 - 0.1206 * 0.75, epsilon = 1e-12);
        // voltage stays below OCV during discharge
        assert!(v.values().iter().all(|&x| x <= 4.165 + 1e-12));
    }

    #[test]
    fn m2_relaxation_recovers_toward_ocv() {
        let i = default_pulse_train(40.0, DEFAULT_TS).unwrap();
        let v = simulate_preset(Preset::M2, &i, None).unwrap();
        // end of first rest: drop mostly relaxed, close to the (slightly
        // depleted) OCV
        let k = 2499;
        let ocv_k = 4.1633 - (1250.0 * 0.008 * 0.75) / 2368.3;
        assert!((v.values()[k] - ocv_k).abs() < 2e-3);
    }

    #[test]
    fn mrandles_diffusion_tail_is_slower_than_rc() {
        let ts = DEFAULT_TS;
        let i = default_pulse_train(40.0, ts).unwrap();
        let real = normalized_warburg(5, 4000, ts).unwrap();
        let vr = simulate_preset(Preset::Mrandles, &i, Some(&real)).unwrap();
        // relaxation during rest is monotone upward (diffusion discharge)
        let rest = &vr.values()[1260..2490];
        assert!(rest.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }
}
