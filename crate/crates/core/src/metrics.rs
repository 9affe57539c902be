//! Field and design metrics: relative L2, R², force coefficients, and the
//! KL divergence of slice weights from uniform.

use crate::dataio::MeshSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `|pred - truth|_2 / |truth|_2` over the flattened field.
pub fn relative_l2(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension { op: "relative_l2", lhs: pred.shape().to_vec(), rhs: truth.shape().to_vec() });
    }
    let num: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = truth.data().iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::Domain("relative_l2: truth has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Relative L2 of each output column of `[N, d]` fields.
pub fn relative_l2_per_field(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension { op: "relative_l2", lhs: pred.shape().to_vec(), rhs: truth.shape().to_vec() });
    }
    let (n, d) = (truth.rows(), truth.cols());
    (0..d)
        .map(|j| {
            let col = |t: &Tensor<f64>| Tensor::new(vec![n], (0..n).map(|i| t.at(i, j)).collect());
            relative_l2(&col(pred)?, &col(truth)?)
        })
        .collect()
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension { op: "r_squared", lhs: vec![pred.len()], rhs: vec![truth.len()] });
    }
    if truth.len() < 2 {
        return Err(Error::Domain("r_squared needs at least two values".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("r_squared: truth is constant".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Free-stream conditions for force coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConditions {
    pub rho: f64,
    pub v_inf: f64,
    pub ref_area: f64,
}

/// Discrete force coefficient along unit `direction`:
///
/// `1 / (rho v^2 A / 2) * sum_i (-p_i n_i . d + t_i . d) a_i`
///
/// `shear`, when given, holds per-point wall tractions `t_i = tau_i n_i`
/// (`[N, 3]`), i.e. the shear tensor already applied to the normal. Lift
/// and drag differ only in `direction`.
pub fn aero_coefficient(
    sample: &MeshSample,
    pressure: &[f64],
    shear: Option<&Tensor<f64>>,
    direction: [f64; 3],
    flow: FlowConditions,
) -> Result<f64> {
    let normals = sample.normals.as_ref().ok_or_else(|| Error::Validation("aero_coefficient needs normals".into()))?;
    let areas = sample.areas.as_ref().ok_or_else(|| Error::Validation("aero_coefficient needs areas".into()))?;
    let n = sample.n();
    if pressure.len() != n {
        return Err(Error::Dimension { op: "aero_coefficient pressure", lhs: vec![pressure.len()], rhs: vec![n] });
    }
    if let Some(s) = shear {
        if s.shape() != [n, 3] {
            return Err(Error::Dimension { op: "aero_coefficient shear", lhs: s.shape().to_vec(), rhs: vec![n, 3] });
        }
    }
    let dlen = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (dlen - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("direction has length {dlen}, expected 1")));
    }
    let q = 0.5 * flow.rho * flow.v_inf * flow.v_inf * flow.ref_area;
    if !(q > 0.0) {
        return Err(Error::Validation("dynamic pressure times reference area must be positive".into()));
    }
    let dot = |v: &[f64]| v[0] * direction[0] + v[1] * direction[1] + v[2] * direction[2];
    let mut force = 0.0;
    for i in 0..n {
        let mut f = -pressure[i] * dot(normals.row(i));
        if let Some(s) = shear {
            f += dot(s.row(i));
        }
        force += f * areas.data()[i];
    }
    Ok(force / q)
}

/// Mean over rows of `KL(w_i || Uniform(M)) = sum_j w_ij log(w_ij M)`,
/// with `0 log 0 = 0`. Every row must sum to 1 within `1e-9`.
pub fn kl_uniform<T: Scalar>(w: &Tensor<T>) -> Result<f64> {
    let (n, m) = w.dims2("kl_uniform")?;
    let mut total = 0.0;
    for i in 0..n {
        let row = w.row(i);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Validation(format!("row {i} is not a distribution (sum {sum})")));
        }
        total += row
            .iter()
            .map(|v| v.as_f64())
            .filter(|&v| v > 0.0)
            .map(|v| v * (v * m as f64).ln())
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Ellipsoid;

    fn vec_t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relative_l2_examples() {
        let t = vec_t(&[1.0, -2.0, 3.0]);
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_l2(&vec_t(&[0.0; 3]), &t).unwrap(), 1.0);
        assert_eq!(relative_l2(&t.map(|x| 2.0 * x), &t).unwrap(), 1.0);
        assert!(matches!(relative_l2(&t, &vec_t(&[0.0; 3])), Err(Error::Domain(_))));
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0; 3], &y).unwrap(), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 4.0], &y).unwrap(), 0.5);
        assert!(matches!(r_squared(&[1.0, 1.0], &[3.0, 3.0]), Err(Error::Domain(_))));
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    fn unit_sphere(n: usize) -> MeshSample {
        let body = Ellipsoid { axes: [1.0; 3], rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
        let (p, nr, a) = body.sample_surface(n);
        MeshSample {
            coords: Tensor::new(vec![n, 3], p.concat()).unwrap(),
            normals: Some(Tensor::new(vec![n, 3], nr.concat()).unwrap()),
            extra: None,
            targets: Tensor::zeros(&[n, 1]),
            areas: Some(Tensor::new(vec![n], a).unwrap()),
        }
    }

    const FLOW: FlowConditions = FlowConditions { rho: 1.0, v_inf: 1.0, ref_area: 1.0 };

    #[test]
    fn zero_pressure_and_linearity() {
        let s = unit_sphere(100);
        assert_eq!(aero_coefficient(&s, &[0.0; 100], None, [0.0, 0.0, 1.0], FLOW).unwrap(), 0.0);
        let p: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let p2: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let c = aero_coefficient(&s, &p, None, [0.0, 0.0, 1.0], FLOW).unwrap();
        assert_eq!(aero_coefficient(&s, &p2, None, [0.0, 0.0, 1.0], FLOW).unwrap(), 2.0 * c);
    }

    #[test]
    fn sphere_lift_matches_analytic() {
        // p = -n_z gives sum n_z^2 a_i -> 4 pi / 3 on the unit sphere.
        let s = unit_sphere(10_000);
        let p: Vec<f64> = (0..10_000).map(|i| -s.normals.as_ref().unwrap().at(i, 2)).collect();
        let c = aero_coefficient(&s, &p, None, [0.0, 0.0, 1.0], FLOW).unwrap();
        let exact = 2.0 * 4.0 * std::f64::consts::PI / 3.0;
        assert!((c - exact).abs() / exact < 1e-3, "{c} vs {exact}");
    }

    #[test]
    fn shear_contributes_traction_projection() {
        let s = unit_sphere(10);
        let shear = Tensor::from_fn(&[10, 3], |k| if k % 3 == 0 { 1.0 } else { 0.0 });
        let c = aero_coefficient(&s, &[0.0; 10], Some(&shear), [1.0, 0.0, 0.0], FLOW).unwrap();
        let total: f64 = s.areas.as_ref().unwrap().data().iter().sum();
        assert!((c - 2.0 * total).abs() < 1e-12);
    }

    #[test]
    fn missing_normals_is_validation_error() {
        let mut s = unit_sphere(10);
        s.normals = None;
        assert!(matches!(aero_coefficient(&s, &[0.0; 10], None, [1.0, 0.0, 0.0], FLOW), Err(Error::Validation(_))));
    }

    #[test]
    fn kl_examples() {
        let u = Tensor::full(&[3, 4], 0.25);
        assert_eq!(kl_uniform(&u).unwrap(), 0.0);
        let one_hot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(kl_uniform(&one_hot).unwrap(), 4f64.ln());
        let w = Tensor::from_rows(&[vec![0.75, 0.25]]).unwrap();
        assert!((kl_uniform(&w).unwrap() - 0.130812).abs() < 1e-6);
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(kl_uniform(&bad), Err(Error::Validation(_))));
    }
}
