//! The n-body network: stacked heading vectors `d_i = R_i e_3`, their
//! normalized average `d̄`, and the stealthy projection of autonomous input
//! into the null space of the average dynamics.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x2};

use crate::error::{Error, Result};
use crate::so3::{e3, hat, sk_vee, step_rotation, Matrix3, Rotation, UnitVector3, Vector3};

/// Default lower bound on ‖Σ d_i‖.
pub const EPS_AVG: f64 = 1e-6;
/// Default lower bound on the smallest eigenvalue of the projector Gram matrix.
pub const EPS_RANK: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyState {
    pub id: usize,
    pub rotation: Rotation,
}

/// Immutable snapshot of all body attitudes with the derived average.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    bodies: Vec<BodyState>,
    sum: Vector3,
    average: UnitVector3,
}

impl NetworkState {
    pub fn new(rotations: Vec<Rotation>) -> Result<Self> {
        if rotations.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one body".into()));
        }
        let bodies = rotations
            .into_iter()
            .enumerate()
            .map(|(i, rotation)| BodyState { id: i + 1, rotation })
            .collect::<Vec<_>>();
        Self::from_bodies(bodies)
    }

    fn from_bodies(bodies: Vec<BodyState>) -> Result<Self> {
        let sum = bodies
            .iter()
            .fold(Vector3::zeros(), |acc, b| acc + b.rotation.z_axis());
        let norm = sum.norm();
        if norm <= EPS_AVG {
            return Err(Error::DegenerateAverage(norm));
        }
        Ok(NetworkState {
            bodies,
            sum,
            average: UnitVector3::new_unchecked(sum / norm),
        })
    }

    pub fn len(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bodies.is_empty()
    }

    pub fn bodies(&self) -> &[BodyState] {
        &self.bodies
    }

    pub fn rotations(&self) -> impl Iterator<Item = &Rotation> {
        self.bodies.iter().map(|b| &b.rotation)
    }

    /// Stacked headings `d = [d_1; …; d_n]`.
    pub fn headings(&self) -> DVector<f64> {
        let mut d = DVector::zeros(3 * self.len());
        for (i, b) in self.bodies.iter().enumerate() {
            d.fixed_rows_mut::<3>(3 * i).copy_from(&b.rotation.z_axis());
        }
        d
    }

    /// `d̄ = Σ d_i / ‖Σ d_i‖`.
    pub fn average(&self) -> UnitVector3 {
        self.average
    }

    /// ‖Σ d_i‖.
    pub fn sum_norm(&self) -> f64 {
        self.sum.norm()
    }
}

/// Human and autonomous parts of the stacked body velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandDecomposition {
    pub omega_h: DVector<f64>,
    pub omega_a: DVector<f64>,
    pub omega_total: DVector<f64>,
}

impl CommandDecomposition {
    pub fn zeros(n: usize) -> Self {
        CommandDecomposition {
            omega_h: DVector::zeros(3 * n),
            omega_a: DVector::zeros(3 * n),
            omega_total: DVector::zeros(3 * n),
        }
    }

    pub fn body(&self, i: usize) -> Vector3 {
        self.omega_total.fixed_rows::<3>(3 * i).into_owned()
    }
}

/// `S(d)`: block-diagonal with blocks `−R_i ê_3`, so that `ḋ = S(d) Ω`.
pub fn collective_jacobian(net: &NetworkState) -> DMatrix<f64> {
    let n = net.len();
    let e3_hat = hat(&e3());
    let mut s = DMatrix::zeros(3 * n, 3 * n);
    for (i, r) in net.rotations().enumerate() {
        let block: Matrix3 = -(r.matrix() * e3_hat);
        s.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&block);
    }
    s
}

/// `∂d̄/∂d`, whose blocks all equal `(I − d̄d̄ᵀ)/‖Σ d_j‖`.
pub fn average_jacobian(net: &NetworkState) -> Result<DMatrix<f64>> {
    let sigma = net.sum_norm();
    if sigma <= EPS_AVG {
        return Err(Error::DegenerateAverage(sigma));
    }
    let block = tangent_projector(&net.average()) / sigma;
    let n = net.len();
    let mut j = DMatrix::zeros(3, 3 * n);
    for i in 0..n {
        j.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&block);
    }
    Ok(j)
}

fn tangent_projector(u: &UnitVector3) -> Matrix3 {
    Matrix3::identity() - u.into_inner() * u.transpose()
}

/// Orthonormal basis of the plane orthogonal to `u`.
fn tangent_basis(u: &UnitVector3) -> Matrix3x2<f64> {
    let u = u.into_inner();
    let seed = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = (seed - u * u.dot(&seed)).normalize();
    let t2 = u.cross(&t1);
    Matrix3x2::from_columns(&[t1, t2])
}

/// `W(d) = ((∂d̄/∂d) S(d))ᵀ`, a 3n×3 matrix.
pub fn average_velocity_map(net: &NetworkState) -> Result<DMatrix<f64>> {
    Ok((average_jacobian(net)? * collective_jacobian(net)).transpose())
}

/// `A(d)`, the orthogonal projector onto the null space of `Wᵀ`.
///
/// `W d̄ = 0` always holds (the average stays unit-norm), so the Gram matrix is
/// formed in a basis `T` of `d̄⊥`: `A = I − W_T (W_TᵀW_T)⁻¹ W_Tᵀ` with
/// `W_T = W T`. Both span the same range.
pub fn stealthy_projector(net: &NetworkState) -> Result<DMatrix<f64>> {
    let w = average_velocity_map(net)?;
    let basis = tangent_basis(&net.average());
    let t = DMatrix::from_column_slice(3, 2, basis.as_slice());
    let wt = &w * t;
    let gram = wt.transpose() * &wt;
    let gram = Matrix2::new(gram[(0, 0)], gram[(0, 1)], gram[(1, 0)], gram[(1, 1)]);
    let min_eig = gram.symmetric_eigenvalues().min();
    if min_eig <= EPS_RANK {
        return Err(Error::RankDeficient(min_eig));
    }
    let chol = gram.cholesky().ok_or(Error::RankDeficient(min_eig))?;
    let inv = chol.inverse();
    let inv = DMatrix::from_column_slice(2, 2, inv.as_slice());
    let n3 = w.nrows();
    Ok(DMatrix::identity(n3, n3) - &wt * inv * wt.transpose())
}

/// Builds `Ω = Ω_h + Ω_a` from the filtered human command (spatial frame) and
/// the raw autonomous signal `Ω̃_a`.
pub fn assemble_command(
    net: &NetworkState,
    omega_h_spatial_tilde: &Vector3,
    omega_a_raw: &DVector<f64>,
) -> Result<CommandDecomposition> {
    let n = net.len();
    if omega_a_raw.len() != 3 * n {
        return Err(Error::InvalidArgument(format!(
            "autonomous signal has length {}, expected {}",
            omega_a_raw.len(),
            3 * n
        )));
    }
    let mut omega_h = DVector::zeros(3 * n);
    for (i, r) in net.rotations().enumerate() {
        let wi = r.matrix().transpose() * omega_h_spatial_tilde;
        omega_h.fixed_rows_mut::<3>(3 * i).copy_from(&wi);
    }
    let omega_a = if omega_a_raw.iter().all(|x| *x == 0.0) {
        DVector::zeros(3 * n)
    } else {
        stealthy_projector(net)? * omega_a_raw
    };
    let omega_total = &omega_h + &omega_a;
    Ok(CommandDecomposition {
        omega_h,
        omega_a,
        omega_total,
    })
}

/// Advances every body by one Lie–Euler step of its slice of `Ω`.
pub fn step_network(net: &NetworkState, cmd: &CommandDecomposition, dt: f64) -> Result<NetworkState> {
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let bodies = net
        .bodies
        .iter()
        .enumerate()
        .map(|(i, b)| BodyState {
            id: b.id,
            rotation: step_rotation(&b.rotation, &cmd.body(i), dt),
        })
        .collect();
    NetworkState::from_bodies(bodies)
}

/// Replaces all rotations, keeping body ids.
pub fn with_rotations(net: &NetworkState, rotations: &[Rotation]) -> Result<NetworkState> {
    let bodies = net
        .bodies
        .iter()
        .zip(rotations)
        .map(|(b, r)| BodyState { id: b.id, rotation: *r })
        .collect();
    NetworkState::from_bodies(bodies)
}

/// Undirected communication graph as adjacency lists over body indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if j >= n || j == i {
                    return Err(Error::InvalidArgument(format!("bad edge {i} -> {j}")));
                }
                if !neighbors[j].contains(&i) {
                    return Err(Error::InvalidArgument(format!("edge {i} -> {j} is not symmetric")));
                }
            }
        }
        Ok(Graph { neighbors })
    }

    pub fn ring(n: usize) -> Self {
        let neighbors = (0..n)
            .map(|i| match n {
                0 | 1 => vec![],
                2 => vec![1 - i],
                _ => vec![(i + n - 1) % n, (i + 1) % n],
            })
            .collect();
        Graph { neighbors }
    }

    pub fn complete(n: usize) -> Self {
        Graph {
            neighbors: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_connected(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Demonstration autonomous law: attitude consensus
/// `ω̃_ai = k_c Σ_{j∈N_i} sk(R_iᵀR_j)∨`, to be filtered through `A(d)`.
pub fn demo_autonomous_law(net: &NetworkState, graph: &Graph, gain: f64) -> DVector<f64> {
    let rotations: Vec<&Rotation> = net.rotations().collect();
    let mut out = DVector::zeros(3 * rotations.len());
    for (i, ri) in rotations.iter().enumerate() {
        let mut acc = Vector3::zeros();
        for &j in graph.neighbors(i) {
            acc += sk_vee(&(ri.matrix().transpose() * rotations[j].matrix()));
        }
        out.fixed_rows_mut::<3>(3 * i).copy_from(&(acc * gain));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp_so3;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng, spread: f64) -> Rotation {
        exp_so3(&Vector3::new(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
        ))
    }

    fn random_network(rng: &mut impl Rng, n: usize) -> NetworkState {
        NetworkState::new((0..n).map(|_| random_rotation(rng, 1.0)).collect()).unwrap()
    }

    fn random_vec(rng: &mut impl Rng, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
    }

    /// d̄ as a function of a raw stacked heading vector (finite-difference oracle).
    fn normalized_sum(d: &DVector<f64>) -> Vector3 {
        let mut s = Vector3::zeros();
        for i in 0..d.len() / 3 {
            s += d.fixed_rows::<3>(3 * i);
        }
        s / s.norm()
    }

    #[test]
    fn single_body_jacobian_is_minus_hat_e3() {
        let net = NetworkState::new(vec![Rotation::identity()]).unwrap();
        let s = collective_jacobian(&net);
        let expected = -hat(&e3());
        assert_eq!(s.fixed_view::<3, 3>(0, 0).into_owned(), expected);
    }

    #[test]
    fn collective_jacobian_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_network(&mut rng, 4);
        let omega = random_vec(&mut rng, 12);
        let h = 1e-6;
        let moved: Vec<Rotation> = net
            .rotations()
            .enumerate()
            .map(|(i, r)| *r * exp_so3(&(omega.fixed_rows::<3>(3 * i) * h)))
            .collect();
        let fd = (NetworkState::new(moved).unwrap().headings() - net.headings()) / h;
        let analytic = collective_jacobian(&net) * &omega;
        assert!((fd - analytic).amax() < 1e-6);
    }

    #[test]
    fn jacobian_blocks_have_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_network(&mut rng, 3);
        let s = collective_jacobian(&net);
        for i in 0..3 {
            let block = s.fixed_view::<3, 3>(3 * i, 3 * i).into_owned();
            let sv = block.svd(false, false).singular_values;
            let rank = sv.iter().filter(|x| **x > 1e-12).count();
            assert_eq!(rank, 2);
        }
    }

    #[test]
    fn average_jacobian_single_body() {
        let r = exp_so3(&Vector3::new(0.4, 0.1, -0.2));
        let net = NetworkState::new(vec![r]).unwrap();
        let d1 = r.z_axis();
        let expected = Matrix3::identity() - d1 * d1.transpose();
        let j = average_jacobian(&net).unwrap();
        assert_abs_diff_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), expected, epsilon = 1e-15);
    }

    #[test]
    fn average_jacobian_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_network(&mut rng, 5);
        let d = net.headings();
        let j = average_jacobian(&net).unwrap();
        let h = 1e-6;
        for k in 0..d.len() {
            let mut plus = d.clone();
            let mut minus = d.clone();
            plus[k] += h;
            minus[k] -= h;
            let col = (normalized_sum(&plus) - normalized_sum(&minus)) / (2.0 * h);
            assert!((col - j.column(k)).amax() < 1e-6, "column {k}");
        }
        let dbar = net.average().into_inner();
        for i in 0..5 {
            assert!((j.fixed_view::<3, 3>(0, 3 * i) * dbar).norm() < 1e-15);
        }
    }

    #[test]
    fn degenerate_average_is_reported() {
        let flip = exp_so3(&(Vector3::x() * std::f64::consts::PI));
        let err = NetworkState::new(vec![Rotation::identity(), flip]).unwrap_err();
        assert!(matches!(err, Error::DegenerateAverage(_)));
    }

    #[test]
    fn projector_is_orthogonal_and_annihilates_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for n in [1, 2, 3, 5] {
            let net = random_network(&mut rng, n);
            let a = stealthy_projector(&net).unwrap();
            let w = average_velocity_map(&net).unwrap();
            assert!((&a * &w).amax() < 1e-9);
            assert!((&a * &a - &a).amax() < 1e-9);
            assert!((&a - a.transpose()).amax() < 1e-12);
            for ev in a.clone().symmetric_eigenvalues().iter() {
                assert!(ev.abs() < 1e-9 || (ev - 1.0).abs() < 1e-9, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn projected_input_leaves_average_still() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 3, 5] {
            for _ in 0..100 {
                let net = random_network(&mut rng, n);
                let raw = random_vec(&mut rng, 3 * n);
                let rate = average_jacobian(&net).unwrap()
                    * collective_jacobian(&net)
                    * (stealthy_projector(&net).unwrap() * raw);
                assert!(rate.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn assemble_command_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = random_network(&mut rng, 3);
        let cmd = assemble_command(&net, &Vector3::zeros(), &DVector::zeros(9)).unwrap();
        assert_eq!(cmd, CommandDecomposition::zeros(3));

        let net = NetworkState::new(vec![Rotation::identity(); 3]).unwrap();
        let cmd = assemble_command(&net, &e3(), &DVector::zeros(9)).unwrap();
        for i in 0..3 {
            assert_eq!(cmd.body(i), e3());
        }

        let raw = random_vec(&mut rng, 9);
        let cmd = assemble_command(&net, &Vector3::new(0.1, 0.2, 0.0), &raw).unwrap();
        assert_eq!(cmd.omega_total, &cmd.omega_h + &cmd.omega_a);
    }

    #[test]
    fn step_network_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = random_network(&mut rng, 3);
        let same = step_network(&net, &CommandDecomposition::zeros(3), 0.01).unwrap();
        for (a, b) in net.rotations().zip(same.rotations()) {
            assert!(a.distance(b) < 1e-15);
        }

        let twin = NetworkState::new(vec![Rotation::identity(); 2]).unwrap();
        let w = Vector3::new(0.3, -0.2, 0.5);
        let raw = DVector::zeros(6);
        let cmd = assemble_command(&twin, &w, &raw).unwrap();
        let next = step_network(&twin, &cmd, 0.01).unwrap();
        assert_eq!(next.bodies()[0].rotation, next.bodies()[1].rotation);

        let dt = 1e-3;
        let cmd = assemble_command(&net, &w, &DVector::zeros(9)).unwrap();
        let next = step_network(&net, &cmd, dt).unwrap();
        let predicted = exp_so3(&(w * dt)) * net.average().into_inner();
        assert!((next.average().into_inner() - predicted).norm() < 10.0 * dt * dt);
    }

    #[test]
    fn demo_law_examples() {
        let r = exp_so3(&Vector3::new(0.2, 0.5, -0.1));
        let net = NetworkState::new(vec![r; 4]).unwrap();
        assert_eq!(demo_autonomous_law(&net, &Graph::ring(4), 1.0), DVector::zeros(12));

        // R_1 = I, R_2 = exp(v): sk(R_2)∨ = sinθ ξ and sk(R_2ᵀ)∨ = −sinθ ξ.
        let v = Vector3::new(0.0, 0.3, 0.4);
        let net = NetworkState::new(vec![Rotation::identity(), exp_so3(&v)]).unwrap();
        let out = demo_autonomous_law(&net, &Graph::ring(2), 2.0);
        let expected = v.normalize() * v.norm().sin() * 2.0;
        assert_abs_diff_eq!(out.fixed_rows::<3>(0).into_owned(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(out.fixed_rows::<3>(3).into_owned(), -expected, epsilon = 1e-15);
    }

    #[test]
    fn graph_validation() {
        assert!(Graph::ring(5).is_connected());
        assert!(Graph::complete(4).is_connected());
        assert!(!Graph::new(vec![vec![1], vec![0], vec![]]).unwrap().is_connected());
        assert!(Graph::new(vec![vec![1], vec![]]).is_err());
    }
}
