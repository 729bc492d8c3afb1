//! Balanced truncation.

use crate::error::{Error, Result};
use crate::models::SystemModel;
use crate::numerics::{is_hurwitz, psd_sqrt, solve_lyapunov, sym_eig, Mat, Vector};

/// Controllability and observability Gramians of the linear part.
pub fn gramians(model: &SystemModel) -> Result<(Mat, Mat)> {
    let h = is_hurwitz(&model.a)?;
    if !h.hurwitz {
        return Err(Error::NotHurwitz(h.abscissa));
    }
    let wc = solve_lyapunov(&model.a.transpose(), &(&model.b * model.b.transpose()))?;
    let wo = solve_lyapunov(&model.a, &(model.c.transpose() * &model.c))?;
    Ok((wc, wo))
}

#[derive(Debug, Clone)]
pub struct Reduction {
    pub reduced: SystemModel,
    /// n×r, maps reduced states into the full space.
    pub p: Mat,
    /// r×n left projector, `t·p = I`.
    pub t: Mat,
    /// Descending.
    pub hankel: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Projects every matrix of `model` with `x = P x_r`, `x_r = T x`.
pub fn project(model: &SystemModel, t: &Mat, p: &Mat) -> SystemModel {
    SystemModel {
        a: t * &model.a * p,
        b: t * &model.b,
        c: &model.c * p,
        g: t * &model.g,
        s_int: t * &model.s_int,
        e: t * &model.e,
        f: &model.f * p,
        phi: model.phi,
        c_int: &model.c_int * p,
    }
}

pub fn balanced_truncate(model: &SystemModel, r: usize) -> Result<Reduction> {
    let n = model.n();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("order {r} outside 1..={n}")));
    }
    let (wc, wo) = gramians(model)?;
    let rc = psd_sqrt(&crate::numerics::symmetrize(&wc))?;
    let e = sym_eig(&crate::numerics::symmetrize(&(&rc * &wo * &rc)))?;
    // descending order
    let idx: Vec<usize> = (0..n).rev().collect();
    let hankel: Vec<f64> = idx.iter().map(|&i| e.values[i].max(0.0).sqrt()).collect();
    let mut warnings = Vec::new();
    let s1 = hankel[0].max(f64::MIN_POSITIVE);
    if hankel[r - 1] <= 1e-14 * s1 {
        return Err(Error::InvalidArgument(format!(
            "order {r} exceeds the numerical rank of the Gramian product"
        )));
    }
    if hankel[r - 1] <= 1e-10 * s1 {
        warnings.push(format!("order {r} is close to the numerical rank"));
    }
    for k in 1..r.min(n) {
        if (hankel[k - 1] - hankel[k]).abs() <= 1e-10 * s1 {
            warnings.push(format!("repeated Hankel value at position {k}; balancing is not unique"));
        }
    }
    if r < n && (hankel[r - 1] - hankel[r]).abs() <= 1e-10 * s1 {
        warnings.push("truncation splits a repeated Hankel value".into());
    }
    let u = Mat::from_fn(n, r, |row, c| e.vectors[(row, idx[c])]);
    let half = Vector::from_iterator(r, hankel[..r].iter().map(|s| s.powf(-0.5)));
    let three = Vector::from_iterator(r, hankel[..r].iter().map(|s| s.powf(-1.5)));
    let mut p = &rc * &u * Mat::from_diagonal(&half);
    let mut t = Mat::from_diagonal(&three) * u.transpose() * &rc * &wo;
    // sign convention: largest-magnitude output entry of each direction negative
    let c2 = &model.c * &p;
    for j in 0..r {
        let col = c2.column(j);
        let big = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big > 0.0 {
            p.column_mut(j).neg_mut();
            t.row_mut(j).neg_mut();
        }
    }
    Ok(Reduction {
        reduced: project(model, &t, &p),
        p,
        t,
        hankel,
        warnings,
    })
}
