use super::{DiffError, Tape, Var};

/// Absolute floor in the relative-error denominator.
pub const FD_ABS_EPS: f64 = 1e-6;

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with step `step`.
///
/// Non-scalar outputs are reduced with fixed, non-uniform weights so every
/// output coordinate is exercised. Returns
/// `max_i |analytic_i − numeric_i| / (|analytic_i| + |numeric_i| + FD_ABS_EPS)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], shape: &[usize], step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    if step <= 0.0 {
        return Err(DiffError::Invalid(format!("finite-difference step {step} must be positive")));
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::Invalid("finite-difference point must be finite".into()));
    }
    let eval = |tape: &mut Tape, x: Var| -> Result<Var, DiffError> {
        let y = f(tape, x)?;
        let n = tape.value(y).len();
        if n == 1 {
            return Ok(y);
        }
        let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i as f64) * 0.7311).sin()).collect();
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(w, &shape)?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    };

    let mut tape = Tape::new();
    let x = tape.param(point.to_vec(), shape)?;
    let loss = eval(&mut tape, x)?;
    let analytic = tape.backward(loss)?.get(x);

    let value_at = |p: Vec<f64>| -> Result<f64, DiffError> {
        let mut t = Tape::no_grad();
        let x = t.constant(p, shape)?;
        let y = eval(&mut t, x)?;
        Ok(t.scalar(y))
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += step;
        let mut minus = point.to_vec();
        minus[i] -= step;
        let numeric = (value_at(plus)? - value_at(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + FD_ABS_EPS);
        worst = worst.max(err);
    }
    Ok(worst)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>>;

/// One differentiable op exercised by the finite-difference suite.
pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub f: OpFn,
}

fn case(name: &'static str, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var, DiffError> + 'static) -> OpCase {
    OpCase {
        name,
        shape: shape.to_vec(),
        f: Box::new(f),
    }
}

/// Every differentiable op kind, each wrapped so that an 8-element input
/// drives it. Binary ops split the input in two halves.
pub fn registered_ops() -> Vec<OpCase> {
    let halves = |t: &mut Tape, x: Var| -> Result<(Var, Var), DiffError> {
        Ok((t.slice_rows(x, 0, 1)?, t.slice_rows(x, 1, 1)?))
    };
    vec![
        case("add", &[2, 4], move |t, x| {
            let (a, b) = halves(t, x)?;
            t.add(a, b)
        }),
        case("sub", &[2, 4], move |t, x| {
            let (a, b) = halves(t, x)?;
            t.sub(a, b)
        }),
        case("mul", &[2, 4], move |t, x| {
            let (a, b) = halves(t, x)?;
            t.mul(a, b)
        }),
        case("div", &[2, 4], move |t, x| {
            let (a, b) = halves(t, x)?;
            let b2 = t.mul(b, b)?;
            let den = t.offset(b2, 1.0)?;
            t.div(a, den)
        }),
        case("scale", &[2, 4], |t, x| t.scale(x, -1.7)),
        case("offset", &[2, 4], |t, x| {
            let y = t.offset(x, 0.3)?;
            t.mul(y, y)
        }),
        case("scalar_mul", &[2, 4], |t, x| {
            let s = t.slice_cols(x, 0, 1)?;
            let s = t.slice_rows(s, 0, 1)?;
            t.scalar_mul(s, x)
        }),
        case("add_row", &[2, 4], move |t, x| {
            let (_, row) = halves(t, x)?;
            t.add_row(x, row)
        }),
        case("matmul", &[2, 4], |t, x| {
            let xt = t.transpose(x)?;
            t.matmul(xt, x)
        }),
        case("transpose", &[2, 4], |t, x| {
            let xt = t.transpose(x)?;
            let c = t.constant((0..8).map(|i| i as f64 - 3.5).collect(), &[4, 2])?;
            t.mul(xt, c)
        }),
        case("concat_rows", &[2, 4], |t, x| {
            let y = t.concat_rows(&[x, x])?;
            t.mul(y, y)
        }),
        case("concat_cols", &[2, 4], |t, x| {
            let a = t.slice_cols(x, 0, 1)?;
            let y = t.concat_cols(&[x, a])?;
            t.mul(y, y)
        }),
        case("slice", &[2, 4], |t, x| {
            let a = t.slice_cols(x, 1, 2)?;
            let b = t.slice_rows(x, 1, 1)?;
            let a2 = t.sq_norm(a)?;
            let b2 = t.sq_norm(b)?;
            let bb = t.mul(b2, a2)?;
            t.add(bb, a2)
        }),
        case("reshape", &[2, 4], |t, x| {
            let y = t.reshape(x, &[4, 2])?;
            let c = t.constant((0..8).map(|i| (i as f64).cos()).collect(), &[4, 2])?;
            t.mul(y, c)
        }),
        case("sum", &[2, 4], |t, x| {
            let s = t.sum(x)?;
            t.mul(s, s)
        }),
        case("mean", &[2, 4], |t, x| {
            let s = t.mean(x)?;
            t.mul(s, s)
        }),
        case("sq_norm", &[2, 4], |t, x| t.sq_norm(x)),
        case("softmax_rows", &[2, 4], |t, x| t.softmax(x, 1)),
        case("softmax_cols", &[2, 4], |t, x| t.softmax(x, 0)),
        case("masked_softmax", &[2, 4], |t, x| {
            t.masked_softmax(x, &[true, true, false, true, false, true, true, true])
        }),
        case("rms_norm", &[2, 4], |t, x| {
            let g = t.slice_rows(x, 0, 1)?;
            t.rms_norm(x, g, 1e-6)
        }),
        case("silu", &[2, 4], |t, x| t.silu(x)),
        case("tanh", &[2, 4], |t, x| t.tanh(x)),
        case("sqrt", &[2, 4], |t, x| {
            let y = t.mul(x, x)?;
            let y = t.offset(y, 0.5)?;
            t.sqrt(y)
        }),
        case("rope", &[2, 4], |t, x| {
            let table = std::rc::Rc::new(super::RopeTable::new(&[3.0, -2.0], 1, 4, 10000.0));
            t.rope(x, table)
        }),
    ]
}
