//! Conservation laws and numerical fluxes.
//!
//! States are plain slices of length `n_vars`; flux and Jacobian values use
//! fixed-size arrays padded to `MAX_VARS`.

use thiserror::Error;

pub const MAX_VARS: usize = 3;
pub type State = [f64; MAX_VARS];
/// Per variable, the x and y flux components.
pub type FluxTensor = [[f64; 2]; MAX_VARS];
/// `m[r][c] = d out_r / d u_c`.
pub type Mat = [[f64; MAX_VARS]; MAX_VARS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("artificial compressibility must be positive, got {0}")]
    Theta(f64),
    #[error("viscosity must be nonnegative, got {0}")]
    Viscosity(f64),
    #[error("unphysical state: P + theta + (v.n)^2/4 = {0} < 0")]
    Unphysical(f64),
    #[error("non-finite parameter")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConservationLaw {
    Advection {
        velocity: [f64; 2],
    },
    /// Entropically damped artificial compressibility, variables (P, v_x, v_y).
    Edac {
        theta: f64,
        nu: f64,
    },
}

/// Lower bound on the advection trace stabilization, relative to |a|.
pub const ADVECTION_HYBRID_FLOOR: f64 = 1e-10;

impl ConservationLaw {
    pub fn advection(velocity: [f64; 2]) -> Result<Self, PhysicsError> {
        if !velocity.iter().all(|v| v.is_finite()) {
            return Err(PhysicsError::NonFinite);
        }
        Ok(Self::Advection { velocity })
    }

    pub fn edac(theta: f64, nu: f64) -> Result<Self, PhysicsError> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(PhysicsError::Theta(theta));
        }
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(PhysicsError::Viscosity(nu));
        }
        Ok(Self::Edac { theta, nu })
    }

    pub fn n_vars(&self) -> usize {
        match self {
            Self::Advection { .. } => 1,
            Self::Edac { .. } => 3,
        }
    }

    pub fn has_viscous(&self) -> bool {
        matches!(self, Self::Edac { nu, .. } if *nu > 0.0)
    }

    pub fn nu(&self) -> f64 {
        match self {
            Self::Edac { nu, .. } => *nu,
            Self::Advection { .. } => 0.0,
        }
    }

    /// True when the convective flux is linear in the state.
    pub fn is_linear(&self) -> bool {
        matches!(self, Self::Advection { .. })
    }

    pub fn flux(&self, u: &[f64]) -> FluxTensor {
        let mut f = [[0.0; 2]; MAX_VARS];
        match *self {
            Self::Advection { velocity: a } => {
                f[0] = [a[0] * u[0], a[1] * u[0]];
            }
            Self::Edac { theta, .. } => {
                let (p, vx, vy) = (u[0], u[1], u[2]);
                f[0] = [vx * (p + theta), vy * (p + theta)];
                f[1] = [vx * vx + p, vx * vy];
                f[2] = [vy * vx, vy * vy + p];
            }
        }
        f
    }

    pub fn normal_flux(&self, u: &[f64], n: [f64; 2]) -> State {
        match *self {
            Self::Advection { velocity: a } => [(a[0] * n[0] + a[1] * n[1]) * u[0], 0.0, 0.0],
            Self::Edac { theta, .. } => {
                let (p, vx, vy) = (u[0], u[1], u[2]);
                let vn = vx * n[0] + vy * n[1];
                [vn * (p + theta), vx * vn + p * n[0], vy * vn + p * n[1]]
            }
        }
    }

    pub fn normal_flux_jacobian(&self, u: &[f64], n: [f64; 2]) -> Mat {
        let mut m = [[0.0; MAX_VARS]; MAX_VARS];
        match *self {
            Self::Advection { velocity: a } => m[0][0] = a[0] * n[0] + a[1] * n[1],
            Self::Edac { theta, .. } => {
                let (p, vx, vy) = (u[0], u[1], u[2]);
                let vn = vx * n[0] + vy * n[1];
                m[0] = [vn, (p + theta) * n[0], (p + theta) * n[1]];
                m[1] = [n[0], vn + vx * n[0], vx * n[1]];
                m[2] = [n[1], vy * n[0], vn + vy * n[1]];
            }
        }
        m
    }

    /// `nu` times the gradient, row by row.
    pub fn viscous_flux(&self, grad: &[[f64; 2]]) -> FluxTensor {
        let nu = self.nu();
        let mut f = [[0.0; 2]; MAX_VARS];
        for (fv, g) in f.iter_mut().zip(grad) {
            *fv = [nu * g[0], nu * g[1]];
        }
        f
    }

    /// Largest characteristic speed of one state in direction `n`, with its
    /// derivative. NaN for an unphysical state.
    fn wavespeed_with_derivative(&self, u: &[f64], n: [f64; 2]) -> (f64, State) {
        match *self {
            Self::Advection { velocity: a } => ((a[0] * n[0] + a[1] * n[1]).abs(), [0.0; MAX_VARS]),
            Self::Edac { theta, .. } => {
                let vn = u[1] * n[0] + u[2] * n[1];
                let d = (0.25 * vn * vn + u[0] + theta).sqrt();
                let dvn = 1.5 * sign(vn) + 0.25 * vn / d;
                (1.5 * vn.abs() + d, [0.5 / d, dvn * n[0], dvn * n[1]])
            }
        }
    }

    pub fn wavespeed(&self, u: &[f64], n: [f64; 2]) -> f64 {
        self.wavespeed_with_derivative(u, n).0
    }

    fn check_state(&self, u: &[f64], n: [f64; 2]) -> Result<(), PhysicsError> {
        if let Self::Edac { theta, .. } = *self {
            let vn = u[1] * n[0] + u[2] * n[1];
            let disc = 0.25 * vn * vn + u[0] + theta;
            if !(disc >= 0.0) {
                return Err(PhysicsError::Unphysical(disc));
            }
        }
        Ok(())
    }

    pub fn max_wavespeed(&self, ul: &[f64], ur: &[f64], n: [f64; 2]) -> Result<f64, PhysicsError> {
        self.check_state(ul, n)?;
        self.check_state(ur, n)?;
        Ok(self.wavespeed(ul, n).max(self.wavespeed(ur, n)))
    }

    /// Largest wave speed over all directions, used for time-step estimates.
    pub fn spectral_radius(&self, u: &[f64]) -> f64 {
        match *self {
            Self::Advection { velocity: a } => a[0].hypot(a[1]),
            Self::Edac { theta, .. } => {
                let v = u[1].hypot(u[2]);
                1.5 * v + (0.25 * v * v + u[0] + theta).max(0.0).sqrt()
            }
        }
    }

    pub fn rusanov_flux(&self, ul: &[f64], ur: &[f64], n: [f64; 2]) -> State {
        let s = self.wavespeed(ul, n).max(self.wavespeed(ur, n));
        let (fl, fr) = (self.normal_flux(ul, n), self.normal_flux(ur, n));
        let mut out = [0.0; MAX_VARS];
        for v in 0..self.n_vars() {
            out[v] = 0.5 * (fl[v] + fr[v]) + 0.5 * s * (ul[v] - ur[v]);
        }
        out
    }

    /// Rusanov flux with its derivatives with respect to `ul` and `ur`.
    pub fn rusanov_flux_jacobians(&self, ul: &[f64], ur: &[f64], n: [f64; 2]) -> (State, Mat, Mat) {
        let nv = self.n_vars();
        let (sl, dsl) = self.wavespeed_with_derivative(ul, n);
        let (sr, dsr) = self.wavespeed_with_derivative(ur, n);
        let (s, left_active) = if sl >= sr { (sl, true) } else { (sr, false) };
        let (fl, fr) = (self.normal_flux(ul, n), self.normal_flux(ur, n));
        let (al, ar) = (self.normal_flux_jacobian(ul, n), self.normal_flux_jacobian(ur, n));
        let mut out = [0.0; MAX_VARS];
        let mut dl = [[0.0; MAX_VARS]; MAX_VARS];
        let mut dr = [[0.0; MAX_VARS]; MAX_VARS];
        for r in 0..nv {
            let jump = ul[r] - ur[r];
            out[r] = 0.5 * (fl[r] + fr[r]) + 0.5 * s * jump;
            for c in 0..nv {
                dl[r][c] = 0.5 * al[r][c];
                dr[r][c] = 0.5 * ar[r][c];
                if left_active {
                    dl[r][c] += 0.5 * jump * dsl[c];
                } else {
                    dr[r][c] += 0.5 * jump * dsr[c];
                }
            }
            dl[r][r] += 0.5 * s;
            dr[r][r] -= 0.5 * s;
        }
        (out, dl, dr)
    }

    fn hybrid_stabilization_with_derivative(&self, uh: &[f64], n: [f64; 2]) -> (f64, State) {
        match *self {
            Self::Advection { velocity: a } => {
                let floor = ADVECTION_HYBRID_FLOOR * a[0].hypot(a[1]).max(1.0);
                ((a[0] * n[0] + a[1] * n[1]).abs().max(floor), [0.0; MAX_VARS])
            }
            Self::Edac { theta, .. } => {
                let v = uh[1].hypot(uh[2]);
                let d = (0.25 * v * v + uh[0] + theta).sqrt();
                let (ex, ey) = if v > 0.0 { (uh[1] / v, uh[2] / v) } else { (0.0, 0.0) };
                (1.5 * v + d, [0.5 / d, 1.5 * ex + 0.25 * uh[1] / d, 1.5 * ey + 0.25 * uh[2] / d])
            }
        }
    }

    /// Trace stabilization `s`: isotropic for EDAC, upwind speed for advection.
    pub fn hybrid_stabilization(&self, uh: &[f64], n: [f64; 2]) -> Result<f64, PhysicsError> {
        if let Self::Edac { theta, .. } = *self {
            let disc = 0.25 * (uh[1] * uh[1] + uh[2] * uh[2]) + uh[0] + theta;
            if !(disc >= 0.0) {
                return Err(PhysicsError::Unphysical(disc));
            }
        }
        Ok(self.hybrid_stabilization_with_derivative(uh, n).0)
    }

    /// `F(uh).n + s (u - uh)`.
    pub fn hybrid_flux(&self, uh: &[f64], u: &[f64], n: [f64; 2]) -> State {
        self.hybrid_flux_jacobians(uh, u, n).0
    }

    /// Hybrid flux with its derivatives with respect to `uh` and `u`.
    pub fn hybrid_flux_jacobians(&self, uh: &[f64], u: &[f64], n: [f64; 2]) -> (State, Mat, Mat) {
        let nv = self.n_vars();
        let (s, ds) = self.hybrid_stabilization_with_derivative(uh, n);
        let f = self.normal_flux(uh, n);
        let a = self.normal_flux_jacobian(uh, n);
        let mut out = [0.0; MAX_VARS];
        let mut d_uh = [[0.0; MAX_VARS]; MAX_VARS];
        let mut d_u = [[0.0; MAX_VARS]; MAX_VARS];
        for r in 0..nv {
            let diff = u[r] - uh[r];
            out[r] = f[r] + s * diff;
            for c in 0..nv {
                d_uh[r][c] = a[r][c] + diff * ds[c];
            }
            d_uh[r][r] -= s;
            d_u[r][r] = s;
        }
        (out, d_uh, d_u)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use proptest::strategy::ValueTree;

    fn edac() -> ConservationLaw {
        ConservationLaw::edac(100.0, 0.01).unwrap()
    }

    #[test]
    fn advection_flux_values() {
        let law = ConservationLaw::advection([1.0, 0.0]).unwrap();
        assert_eq!(law.flux(&[2.0])[0], [2.0, 0.0]);
        assert_eq!(law.flux(&[0.0])[0], [0.0, 0.0]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let law = ConservationLaw::advection([r, r]).unwrap();
        assert_eq!(law.flux(&[1.0])[0], [r, r]);
    }

    #[test]
    fn edac_flux_values() {
        let law = edac();
        let f = law.flux(&[0.0, 1.0, 0.0]);
        assert_eq!([f[0][0], f[1][0], f[2][0]], [100.0, 1.0, 0.0]);
        assert_eq!([f[0][1], f[1][1], f[2][1]], [0.0, 0.0, 0.0]);
        let f = law.flux(&[2.5, 0.0, 0.0]);
        assert_eq!(f, [[0.0, 0.0], [2.5, 0.0], [0.0, 2.5]]);
        let f = law.flux(&[1.0, 2.0, 3.0]);
        assert_eq!([f[0][0], f[1][0], f[2][0]], [202.0, 5.0, 6.0]);
        assert_eq!([f[0][1], f[1][1], f[2][1]], [303.0, 6.0, 10.0]);
    }

    #[test]
    fn viscous_flux_values() {
        let law = edac();
        assert_eq!(law.viscous_flux(&[[0.0; 2]; 3]), [[0.0; 2]; 3]);
        let f = law.viscous_flux(&[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(f[0], [0.01, 0.0]);
        // v_x = y.
        let f = law.viscous_flux(&[[0.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(f[1][1], 0.01);
        assert!(!ConservationLaw::edac(100.0, 0.0).unwrap().has_viscous());
        assert!(ConservationLaw::edac(0.0, 0.0).is_err());
        assert!(ConservationLaw::edac(1.0, -1.0).is_err());
    }

    #[test]
    fn wavespeeds() {
        let adv = ConservationLaw::advection([1.0, 0.0]).unwrap();
        assert_eq!(adv.max_wavespeed(&[1.0], &[2.0], [0.0, 1.0]).unwrap(), 0.0);
        let law = edac();
        assert_abs_diff_eq!(law.max_wavespeed(&[0.0; 3], &[0.0; 3], [1.0, 0.0]).unwrap(), 10.0);
        let s = law.max_wavespeed(&[0.0, 2.0, 0.0], &[0.0; 3], [1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(s, 3.0 + 101f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(s, 13.0499, epsilon = 1e-4);
        assert!(matches!(law.max_wavespeed(&[-200.0, 0.0, 0.0], &[0.0; 3], [1.0, 0.0]), Err(PhysicsError::Unphysical(_))));
    }

    #[test]
    fn rusanov_upwind() {
        let adv = ConservationLaw::advection([1.0, 0.0]).unwrap();
        assert_eq!(adv.rusanov_flux(&[1.0], &[0.0], [1.0, 0.0])[0], 1.0);
    }

    #[test]
    fn hybrid_values() {
        let adv = ConservationLaw::advection([1.0, 0.0]).unwrap();
        assert_eq!(adv.hybrid_flux(&[0.0], &[1.0], [1.0, 0.0])[0], 1.0);
        assert_eq!(adv.hybrid_stabilization(&[0.0], [1.0, 0.0]).unwrap(), 1.0);
        let law = edac();
        assert_eq!(law.hybrid_stabilization(&[0.0; 3], [1.0, 0.0]).unwrap(), 10.0);
        let s = law.hybrid_stabilization(&[1.0, 0.0, 2.0], [1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(s, 3.0 + 102f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(s, 13.0995, epsilon = 1e-4);
        let f = law.hybrid_flux(&[0.0; 3], &[1.0, 0.0, 0.0], [1.0, 0.0]);
        assert_eq!(f, [10.0, 0.0, 0.0]);
        assert!(law.hybrid_stabilization(&[-101.0, 0.0, 0.0], [1.0, 0.0]).is_err());
    }

    fn edac_state() -> impl Strategy<Value = [f64; 3]> {
        (-5.0..5.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(p, x, y)| [p, x, y])
    }

    fn unit() -> impl Strategy<Value = [f64; 2]> {
        (0.0..std::f64::consts::TAU).prop_map(|t| [t.cos(), t.sin()])
    }

    fn fd_check(f: impl Fn(&[f64]) -> State, u: &[f64], jac: &Mat, nv: usize) {
        for c in 0..nv {
            let h = 1e-6;
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[c] += h;
            um[c] -= h;
            let (fp, fm) = (f(&up), f(&um));
            for r in 0..nv {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - jac[r][c]).abs() < 1e-5 * (1.0 + fd.abs()), "r {r} c {c}: {fd} vs {}", jac[r][c]);
            }
        }
    }

    proptest! {
        #[test]
        fn consistency(u in edac_state(), n in unit()) {
            let law = edac();
            let f = law.normal_flux(&u, n);
            let r = law.rusanov_flux(&u, &u, n);
            let h = law.hybrid_flux(&u, &u, n);
            for v in 0..3 {
                prop_assert!((r[v] - f[v]).abs() <= 1e-14 * (1.0 + f[v].abs()));
                prop_assert!((h[v] - f[v]).abs() <= 1e-14 * (1.0 + f[v].abs()));
            }
        }

        #[test]
        fn rusanov_antisymmetric(ul in edac_state(), ur in edac_state(), n in unit()) {
            let law = edac();
            let a = law.rusanov_flux(&ul, &ur, n);
            let b = law.rusanov_flux(&ur, &ul, [-n[0], -n[1]]);
            for v in 0..3 {
                prop_assert_eq!(a[v], -b[v]);
            }
        }

        #[test]
        fn flux_jacobians_match_differences(ul in edac_state(), ur in edac_state(), n in unit()) {
            let law = edac();
            let (_, dl, dr) = law.rusanov_flux_jacobians(&ul, &ur, n);
            fd_check(|u| law.rusanov_flux(u, &ur, n), &ul, &dl, 3);
            fd_check(|u| law.rusanov_flux(&ul, u, n), &ur, &dr, 3);
            let (_, dh, du) = law.hybrid_flux_jacobians(&ul, &ur, n);
            fd_check(|uh| law.hybrid_flux(uh, &ur, n), &ul, &dh, 3);
            fd_check(|u| law.hybrid_flux(&ul, u, n), &ur, &du, 3);
        }
    }

    #[test]
    fn edac_wavespeed_is_spectral_radius() {
        let law = edac();
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        for _ in 0..100 {
            let u = edac_state().new_tree(&mut runner).unwrap().current();
            let n = unit().new_tree(&mut runner).unwrap().current();
            let a = law.normal_flux_jacobian(&u, n);
            let m = Matrix3::from_fn(|r, c| a[r][c]);
            let rho = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!((rho - law.wavespeed(&u, n)).abs() < 1e-8 * rho, "{rho}");
        }
    }
}
