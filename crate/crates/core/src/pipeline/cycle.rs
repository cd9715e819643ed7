use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::{CycleNetworks, ForwardOutputs};
use crate::tensor::Real;
use crate::warp::{warp, WarpDirection};

/// Every intermediate of one pass around the cycle.
#[derive(Clone, Debug)]
pub struct CycleOutputs {
    /// `d_l` and `ξ` from `G_s(I_r)`.
    pub student: ForwardOutputs,
    /// `Î_l = warp(d_l⁰, I_r)`.
    pub left_hat: Var,
    /// `d_r` from `G_b(Î_l)`.
    pub backward: Option<ForwardOutputs>,
    /// `Î_r = warp(d_r⁰, Î_l)`.
    pub right_hat: Option<Var>,
    /// `𝓘_r = I_r − Î_r`.
    pub inconsistency: Option<Var>,
    /// `d_l'` and `ξ'` from `G_i`.
    pub teacher: Option<ForwardOutputs>,
    /// `Î_l' = warp(d_l'⁰, I_r)`.
    pub left_hat_refined: Option<Var>,
}

/// Which branches to evaluate. The teacher needs the backward branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CycleParts {
    pub backward: bool,
    pub teacher: bool,
}

impl CycleParts {
    pub const STUDENT: CycleParts = CycleParts {
        backward: false,
        teacher: false,
    };
    pub const CYCLE: CycleParts = CycleParts {
        backward: true,
        teacher: false,
    };
    pub const FULL: CycleParts = CycleParts {
        backward: true,
        teacher: true,
    };
}

/// Runs `G_s`, the backward cycle and optionally the refiner on `I_r`.
pub fn cycle_forward<T: Real, N: CycleNetworks<T> + ?Sized>(
    g: &mut Graph<T>,
    nets: &N,
    right: Var,
    include_teacher: bool,
) -> Result<CycleOutputs> {
    let parts = if include_teacher {
        CycleParts::FULL
    } else {
        CycleParts::CYCLE
    };
    cycle_forward_parts(g, nets, right, parts)
}

pub fn cycle_forward_parts<T: Real, N: CycleNetworks<T> + ?Sized>(
    g: &mut Graph<T>,
    nets: &N,
    right: Var,
    parts: CycleParts,
) -> Result<CycleOutputs> {
    if parts.teacher && !parts.backward {
        return Err(Error::invalid(
            "cycle_forward",
            "the refiner needs the backward branch for its inconsistency input",
        ));
    }
    let student = nets.student_forward(g, right)?;
    let left_hat = warp(g, &student.disparities[0], right, WarpDirection::SynthesizeLeft)?;
    let mut out = CycleOutputs {
        student,
        left_hat,
        backward: None,
        right_hat: None,
        inconsistency: None,
        teacher: None,
        left_hat_refined: None,
    };
    if !parts.backward {
        return Ok(out);
    }
    let backward = nets.backward_forward(g, left_hat)?;
    let right_hat = warp(g, &backward.disparities[0], left_hat, WarpDirection::SynthesizeRight)?;
    let inc = g.sub(right, right_hat)?;
    out.backward = Some(backward);
    out.right_hat = Some(right_hat);
    out.inconsistency = Some(inc);
    if parts.teacher {
        let [d0, d1, d2, d3] = out.student.disparities;
        let teacher = nets.inconsistency_forward(g, right, inc, &d0, &[d1, d2, d3])?;
        let refined = warp(g, &teacher.disparities[0], right, WarpDirection::SynthesizeLeft)?;
        out.teacher = Some(teacher);
        out.left_hat_refined = Some(refined);
    }
    Ok(out)
}
