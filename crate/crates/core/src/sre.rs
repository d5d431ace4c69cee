//! Series-resistance-equivalent model: discrete simulation and segmented
//! least-squares identification.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::signals::{integrate_charge, SampledSignal, SegmentPlan};

const RANK_RTOL: f64 = 1e-10;

/// Per-segment SRE parameters. `ocv0` is the estimated initial OCV and is
/// only present for the first segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SreParams {
    pub ocv0: Option<f64>,
    pub c0: f64,
    pub r0: f64,
}

/// Identification output for one segment.
#[derive(Debug, Clone)]
pub struct SreFit {
    pub params: SreParams,
    pub residual_rms: f64,
}

/// Simulates one segment: OCV[k+1] = OCV[k] - (Ts / C0) i[k],
/// v[k] = OCV[k] - R0 i[k]. Returns the voltage samples and the OCV at the
/// sample after the last one (the boundary value for the next segment).
pub fn sre_simulate_segment(
    c0: f64,
    r0: f64,
    current: &[f64],
    ts: f64,
    ocv_init: f64,
) -> (Vec<f64>, f64) {
    let mut v = Vec::with_capacity(current.len());
    let mut ocv = ocv_init;
    for &i in current {
        v.push(ocv - r0 * i);
        ocv -= ts / c0 * i;
    }
    (v, ocv)
}

/// Multi-segment simulation with OCV chained across boundaries.
pub fn sre_simulate(
    params: &[SreParams],
    plan: &SegmentPlan,
    current: &SampledSignal,
    ocv_init: f64,
) -> Result<SampledSignal> {
    if params.len() != plan.lengths().len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter sets for {} segments",
            params.len(),
            plan.lengths().len()
        )));
    }
    let ts = current.ts();
    let mut voltage = Vec::with_capacity(plan.total());
    let mut ocv = ocv_init;
    for (p, (start, len)) in params.iter().zip(plan.ranges()) {
        let seg = &current.values()[start..start + len];
        let (v, ocv_next) = sre_simulate_segment(p.c0, p.r0, seg, ts, ocv);
        voltage.extend(v);
        ocv = ocv_next;
    }
    SampledSignal::new(voltage, ts)
}

/// First-segment estimate of [OCV[0], 1/C0, R0] from
/// y[k] = OCV[0] - q_d[k]/C0 - R0 i[k], with q_d[0] = 0.
pub fn sre_identify_segment1(
    current: &SampledSignal,
    voltage: &SampledSignal,
) -> Result<SreFit> {
    let n = current.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 samples for 3 unknowns, got {n}"
        )));
    }
    let q_d = integrate_charge(current, 0.0);
    let phi = DMatrix::from_fn(n, 3, |k, j| match j {
        0 => 1.0,
        1 => -q_d.values()[k],
        _ => -current.values()[k],
    });
    let y = DVector::from_row_slice(voltage.values());
    let fit = lstsq(&phi, &y, RANK_RTOL)?;
    Ok(SreFit {
        params: SreParams {
            ocv0: Some(fit.solution[0]),
            c0: 1.0 / fit.solution[1],
            r0: fit.solution[2],
        },
        residual_rms: fit.residual_rms,
    })
}

/// Segment-i estimate of [1/C0, R0] with the boundary OCV removed and the
/// removed charge restarted at zero inside the segment.
pub fn sre_identify_segment_i(
    current: &SampledSignal,
    voltage: &SampledSignal,
    ocv_boundary: f64,
) -> Result<SreFit> {
    let n = current.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for 2 unknowns, got {n}"
        )));
    }
    let q_d = integrate_charge(current, 0.0);
    let phi = DMatrix::from_fn(n, 2, |k, j| match j {
        0 => -q_d.values()[k],
        _ => -current.values()[k],
    });
    let y = DVector::from_iterator(n, voltage.values().iter().map(|&v| v - ocv_boundary));
    let fit = lstsq(&phi, &y, RANK_RTOL)?;
    Ok(SreFit {
        params: SreParams {
            ocv0: None,
            c0: 1.0 / fit.solution[0],
            r0: fit.solution[1],
        },
        residual_rms: fit.residual_rms,
    })
}

/// Segmented identification over a whole record. The boundary OCV for each
/// segment is the simulated terminal OCV of the previous one.
pub fn sre_identify(
    current: &SampledSignal,
    voltage: &SampledSignal,
    plan: &SegmentPlan,
) -> Result<Vec<SreFit>> {
    let ts = current.ts();
    let mut fits: Vec<SreFit> = Vec::with_capacity(plan.lengths().len());
    let mut ocv = 0.0;
    for (idx, (start, len)) in plan.ranges().into_iter().enumerate() {
        let seg_i = SampledSignal::new(current.values()[start..start + len].to_vec(), ts)?;
        let seg_v = SampledSignal::new(voltage.values()[start..start + len].to_vec(), ts)?;
        let fit = if idx == 0 {
            let f = sre_identify_segment1(&seg_i, &seg_v)?;
            ocv = f.params.ocv0.expect("segment 1 estimates OCV");
            f
        } else {
            sre_identify_segment_i(&seg_i, &seg_v, ocv)?
        };
        // propagate the simulated OCV to the next boundary
        let (_, ocv_next) =
            sre_simulate_segment(fit.params.c0, fit.params.r0, seg_i.values(), ts, ocv);
        ocv = ocv_next;
        fits.push(fit);
    }
    Ok(fits)
}
