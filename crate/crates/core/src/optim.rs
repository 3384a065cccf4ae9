//! Unconstrained minimizers: BFGS for likelihood fits and a line-search
//! Newton-CG with finite-difference Hessian-vector products.

/// Outcome of a minimization.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting at `x0`.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 500,
            max_step: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_cg: usize,
    pub fd_step: f64,
    pub max_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-7,
            max_iter: 200,
            max_cg: 50,
            fd_step: 1e-5,
            max_step: 4.0,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

/// Backtracking Armijo search along `d`; returns the accepted point.
fn backtrack<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    max_step: f64,
) -> Option<(Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let slope = dot(g, d);
    if !(slope < 0.0) {
        return None;
    }
    let dn = inf_norm(d);
    let mut a = if dn > max_step { max_step / dn } else { 1.0 };
    for _ in 0..60 {
        let xn = axpy(x, a, d);
        let (fn_, gn) = f(&xn);
        if fn_.is_finite() && fn_ <= fx + 1e-4 * a * slope && gn.iter().all(|v| v.is_finite()) {
            return Some((xn, fn_, gn));
        }
        a *= 0.5;
    }
    None
}

/// Accepted steps without measurable decrease before BFGS stops.
const STALL_STEPS: usize = 10;
/// A stalled run counts as converged if its gradient is within this factor
/// of the tolerance.
const STALL_GRAD_FACTOR: f64 = 100.0;

/// BFGS with an inverse-Hessian update and Armijo backtracking. Stops when
/// `‖g‖∞ < grad_tol · max(1, |f|)`.
pub fn bfgs<F>(mut f: F, x0: &[f64], opts: BfgsOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut history = vec![fx];
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut Vec<f64>, scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = scale;
        }
    };
    reset(&mut h, 1.0);
    let mut fresh = true;
    let mut it = 0;
    if !fx.is_finite() {
        return OptimResult {
            x,
            f: fx,
            grad_inf: f64::INFINITY,
            iterations: 0,
            converged: false,
            history,
        };
    }
    let tol = |fx: f64| opts.grad_tol * fx.abs().max(1.0);
    let mut stalled = 0;
    while it < opts.max_iter && inf_norm(&g) >= tol(fx) && stalled < STALL_STEPS {
        it += 1;
        let d: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>())
            .collect();
        let step = backtrack(&mut f, &x, fx, &g, &d, opts.max_step).or_else(|| {
            if fresh {
                None
            } else {
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                backtrack(&mut f, &x, fx, &g, &sd, opts.max_step)
            }
        });
        let Some((xn, fnew, gn)) = step else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                reset(&mut h, sy / dot(&y, &y));
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
                .collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        } else {
            reset(&mut h, 1.0);
            fresh = true;
        }
        if fx - fnew <= 1e-15 * fx.abs().max(1.0) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);
    }
    let gi = inf_norm(&g);
    OptimResult {
        x,
        f: fx,
        grad_inf: gi,
        iterations: it,
        converged: gi < tol(fx) || (stalled >= STALL_STEPS && gi < STALL_GRAD_FACTOR * tol(fx)),
        history,
    }
}

/// Line-search Newton-CG: the Newton system is solved inexactly by conjugate
/// gradients with Hessian-vector products from central differences of the
/// gradient.
pub fn newton_cg<F>(mut f: F, x0: &[f64], opts: NewtonOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut history = vec![fx];
    let mut it = 0;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return OptimResult {
            x,
            f: fx,
            grad_inf: f64::INFINITY,
            iterations: 0,
            converged: false,
            history,
        };
    }
    while it < opts.max_iter && inf_norm(&g) >= opts.grad_tol {
        it += 1;
        let gnorm = dot(&g, &g).sqrt();
        let tol = gnorm.sqrt().min(0.5) * gnorm;
        let mut p = vec![0.0; n];
        let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut d = r.clone();
        let mut rr = dot(&r, &r);
        let mut broken = false;
        for k in 0..opts.max_cg {
            let dn = dot(&d, &d).sqrt();
            let h = opts.fd_step / dn;
            let (_, gp) = f(&axpy(&x, h, &d));
            let (_, gm) = f(&axpy(&x, -h, &d));
            if gp.iter().chain(&gm).any(|v| !v.is_finite()) {
                broken = k == 0;
                break;
            }
            let hd: Vec<f64> = gp
                .iter()
                .zip(&gm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            let dhd = dot(&d, &hd);
            if dhd <= 1e-14 * dn * dn {
                broken = k == 0;
                break;
            }
            let a = rr / dhd;
            for i in 0..n {
                p[i] += a * d[i];
                r[i] -= a * hd[i];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= tol {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                d[i] = r[i] + beta * d[i];
            }
        }
        if broken || p.iter().all(|v| *v == 0.0) {
            p = g.iter().map(|v| -v).collect();
        }
        let step = backtrack(&mut f, &x, fx, &g, &p, opts.max_step).or_else(|| {
            let sd: Vec<f64> = g.iter().map(|v| -v / gnorm).collect();
            backtrack(&mut f, &x, fx, &g, &sd, opts.max_step)
        });
        let Some((xn, fnew, gn)) = step else { break };
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);
    }
    let gi = inf_norm(&g);
    OptimResult {
        x,
        f: fx,
        grad_inf: gi,
        iterations: it,
        converged: gi < opts.grad_tol,
        history,
    }
}
