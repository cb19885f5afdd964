use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dist::Distribution;
use super::{Atom, BinOp, Clause, Condition, DcError, DistTag, Expr, Program, Slice, TimeRef, Value};

type Table = BTreeMap<Vec<Atom>, Value>;

/// One sampled assignment of every grounded random variable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct World {
    tables: BTreeMap<(String, Option<u32>), Table>,
    horizon: u32,
}

impl World {
    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn get(&self, name: &str, args: &[Atom], time: Option<u32>) -> Option<&Value> {
        self.tables.get(&(name.to_string(), time))?.get(args)
    }

    /// Every grounding of `name` at `time`, in argument order.
    pub fn groundings(&self, name: &str, time: Option<u32>) -> impl Iterator<Item = (&[Atom], &Value)> {
        self.tables
            .get(&(name.to_string(), time))
            .into_iter()
            .flat_map(|t| t.iter().map(|(k, v)| (k.as_slice(), v)))
    }

    pub fn len(&self) -> usize {
        self.tables.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn define(&mut self, name: &str, args: Vec<Atom>, time: Option<u32>, value: Value) -> bool {
        let table = self.tables.entry((name.to_string(), time)).or_default();
        if table.contains_key(&args) {
            return false;
        }
        table.insert(args, value);
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub probability: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Binding environment for one body solution.
#[derive(Debug, Clone, Default)]
struct Subst(Vec<(String, Value)>);

impl Subst {
    fn get(&self, var: &str) -> Option<&Value> {
        self.0.iter().rev().find(|(k, _)| k == var).map(|(_, v)| v)
    }

    fn with(&self, var: &str, value: Value) -> Subst {
        let mut s = self.clone();
        s.0.push((var.to_string(), value));
        s
    }
}

/// Context for evaluating one clause grounding.
struct Ctx<'a> {
    clause: &'a Clause,
    slice: Slice,
    /// Current `t` for transition clauses.
    t: u32,
}

impl Ctx<'_> {
    fn unbound(&self, var: &str) -> DcError {
        DcError::Unbound {
            clause: self.clause.label(),
            var: var.to_string(),
        }
    }

    fn type_error(&self, reason: impl Into<String>) -> DcError {
        DcError::Type {
            clause: self.clause.label(),
            reason: reason.into(),
        }
    }

    fn head_time(&self) -> Option<u32> {
        match self.slice {
            Slice::Static => None,
            Slice::Initial => Some(0),
            Slice::Transition => Some(self.t + 1),
        }
    }

    fn body_time(&self, time: Option<TimeRef>) -> Option<u32> {
        match (self.slice, time) {
            (_, None) => None,
            (Slice::Initial, Some(_)) => Some(0),
            (_, Some(TimeRef::Now)) => Some(self.t),
            (_, Some(TimeRef::Next)) => Some(self.t + 1),
        }
    }

    fn eval(&self, expr: &Expr, s: &Subst) -> Result<Value, DcError> {
        Ok(match expr {
            Expr::Int(i) => Value::Int(*i),
            Expr::Num(x) => Value::Real(*x),
            Expr::Sym(v) => Value::Sym(v.clone()),
            Expr::Var(v) => s.get(v).cloned().ok_or_else(|| self.unbound(v))?,
            Expr::List(items) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match self.eval(item, s)? {
                        Value::Vector(v) => out.extend(v),
                        other => out.push(
                            other
                                .as_f64()
                                .ok_or_else(|| self.type_error("vector entries must be numeric"))?,
                        ),
                    }
                }
                Value::Vector(out)
            }
            Expr::Op(op, a, b) => {
                let (a, b) = (self.eval(a, s)?, self.eval(b, s)?);
                arith(*op, &a, &b).ok_or_else(|| self.type_error("arithmetic on non-numeric values"))?
            }
        })
    }

    fn eval_f64(&self, expr: &Expr, s: &Subst) -> Result<f64, DcError> {
        self.eval(expr, s)?
            .as_f64()
            .ok_or_else(|| self.type_error("expected a number"))
    }

    fn eval_atom(&self, expr: &Expr, s: &Subst) -> Result<Atom, DcError> {
        self.eval(expr, s)?
            .to_atom()
            .ok_or_else(|| self.type_error("arguments must be integers or symbols"))
    }

    /// All substitutions satisfying `body[idx..]` extended from `s`.
    fn solve(&self, body: &[Condition], s: Subst, world: &World, out: &mut Vec<Subst>) -> Result<(), DcError> {
        let Some((cond, rest)) = body.split_first() else {
            out.push(s);
            return Ok(());
        };
        match cond {
            Condition::Bind { bind, rv, args, time } => {
                let time = self.body_time(*time);
                // Arguments that are still-unbound variables act as patterns.
                let mut pattern: Vec<Result<Atom, &str>> = Vec::with_capacity(args.len());
                for a in args {
                    match a {
                        Expr::Var(v) if s.get(v).is_none() => pattern.push(Err(v.as_str())),
                        other => pattern.push(Ok(self.eval_atom(other, &s)?)),
                    }
                }
                let unify = |s: &Subst, value: &Value| -> Option<Subst> {
                    match s.get(bind) {
                        Some(bound) if bound.loosely_equals(value) => Some(s.clone()),
                        Some(_) => None,
                        None => Some(s.with(bind, value.clone())),
                    }
                };
                if pattern.iter().all(Result::is_ok) {
                    let key: Vec<Atom> = pattern.into_iter().map(|p| p.unwrap()).collect();
                    if let Some(value) = world.get(rv, &key, time) {
                        if let Some(next) = unify(&s, value) {
                            self.solve(rest, next, world, out)?;
                        }
                    }
                    return Ok(());
                }
                for (key, value) in world.groundings(rv, time) {
                    if key.len() != pattern.len() {
                        continue;
                    }
                    let mut next = s.clone();
                    let mut ok = true;
                    for (p, atom) in pattern.iter().zip(key) {
                        match p {
                            Ok(expected) => ok &= expected == atom,
                            Err(var) => match next.get(var) {
                                // repeated pattern variable, e.g. rel(X, X)
                                Some(bound) => ok &= bound.to_atom().as_ref() == Some(atom),
                                None => next = next.with(var, atom.clone().into()),
                            },
                        }
                        if !ok {
                            break;
                        }
                    }
                    if ok {
                        if let Some(next) = unify(&next, value) {
                            self.solve(rest, next, world, out)?;
                        }
                    }
                }
                Ok(())
            }
            Condition::Between { between: (lo, hi, var) } => {
                let lo = self.eval(lo, &s)?.as_int().ok_or_else(|| self.type_error("between bounds must be integers"))?;
                let hi = self.eval(hi, &s)?.as_int().ok_or_else(|| self.type_error("between bounds must be integers"))?;
                match s.get(var).cloned() {
                    Some(v) => {
                        if v.as_int().is_some_and(|i| lo <= i && i <= hi) {
                            self.solve(rest, s, world, out)?;
                        }
                    }
                    None => {
                        for i in lo..=hi {
                            self.solve(rest, s.with(var, Value::Int(i)), world, out)?;
                        }
                    }
                }
                Ok(())
            }
            Condition::Compare { cmp, lhs, rhs } => {
                let (a, b) = (self.eval(lhs, &s)?, self.eval(rhs, &s)?);
                if cmp.apply(&a, &b) {
                    self.solve(rest, s, world, out)?;
                }
                Ok(())
            }
        }
    }

    fn resolve(&self, s: &Subst) -> Result<Distribution, DcError> {
        let params = &self.clause.dist.params;
        let arity = |n: usize| -> Result<(), DcError> {
            if params.len() != n {
                return Err(self.type_error(format!("{:?} takes {n} parameters", self.clause.dist.tag)));
            }
            Ok(())
        };
        let dist = match self.clause.dist.tag {
            DistTag::Poisson => {
                arity(1)?;
                Distribution::poisson(self.eval_f64(&params[0], s)?)
            }
            DistTag::Uniform => {
                arity(2)?;
                Distribution::uniform(self.eval_f64(&params[0], s)?, self.eval_f64(&params[1], s)?)
            }
            DistTag::Gaussian => {
                arity(2)?;
                match (self.eval(&params[0], s)?, &params[1]) {
                    (Value::Vector(mean), Expr::List(rows)) => {
                        let mut cov = Vec::with_capacity(rows.len());
                        for row in rows {
                            match self.eval(row, s)? {
                                Value::Vector(r) => cov.push(r),
                                _ => return Err(self.type_error("covariance rows must be lists")),
                            }
                        }
                        Distribution::multivariate(mean, cov)
                    }
                    (mean, var) => {
                        let mean = mean.as_f64().ok_or_else(|| self.type_error("gaussian mean must be numeric"))?;
                        Distribution::gaussian(mean, self.eval_f64(var, s)?)
                    }
                }
            }
            DistTag::Finite => {
                let mut outcomes = Vec::with_capacity(params.len());
                for p in params {
                    let Expr::List(pair) = p else {
                        return Err(self.type_error("finite outcomes are [weight, value] pairs"));
                    };
                    let [w, v] = pair.as_slice() else {
                        return Err(self.type_error("finite outcomes are [weight, value] pairs"));
                    };
                    outcomes.push((self.eval_f64(w, s)?, self.eval(v, s)?));
                }
                Distribution::finite(outcomes)
            }
        };
        dist.map_err(|e| match e {
            DcError::InvalidDistribution(msg) => self.type_error(msg),
            other => other,
        })
    }

    fn fire<R: Rng + ?Sized>(&self, world: &mut World, rng: &mut R) -> Result<(), DcError> {
        let mut solutions = Vec::new();
        self.solve(&self.clause.body, Subst::default(), world, &mut solutions)?;
        let time = self.head_time();
        for s in solutions {
            let args = self
                .clause
                .args
                .iter()
                .map(|a| self.eval_atom(a, &s))
                .collect::<Result<Vec<_>, _>>()?;
            if world
                .get(&self.clause.head, &args, time)
                .is_some()
            {
                continue;
            }
            let value = self.resolve(&s)?.sample(rng);
            world.define(&self.clause.head, args, time, value);
        }
        Ok(())
    }
}

fn arith(op: BinOp, a: &Value, b: &Value) -> Option<Value> {
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        match op {
            BinOp::Add => return x.checked_add(*y).map(Value::Int),
            BinOp::Sub => return x.checked_sub(*y).map(Value::Int),
            BinOp::Mul => return x.checked_mul(*y).map(Value::Int),
            BinOp::Div => {}
        }
    }
    if let (Value::Vector(x), Some(y)) = (a, b.as_f64()) {
        return Some(Value::Vector(x.iter().map(|xi| apply(op, *xi, y)).collect()));
    }
    let (x, y) = (a.as_f64()?, b.as_f64()?);
    Some(Value::Real(apply(op, x, y)))
}

fn apply(op: BinOp, x: f64, y: f64) -> f64 {
    match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    }
}

/// Samples one world over time steps `0..=horizon`, seeded.
pub fn sample_world(program: &Program, horizon: u32, seed: u64) -> Result<World, DcError> {
    sample_world_with(program, horizon, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_world_with<R: Rng + ?Sized>(program: &Program, horizon: u32, rng: &mut R) -> Result<World, DcError> {
    let mut world = World {
        horizon,
        ..World::default()
    };
    for (slice, clauses) in program.slices() {
        let steps = match slice {
            Slice::Transition => horizon,
            _ => 1,
        };
        for t in 0..steps {
            for clause in clauses {
                Ctx { clause, slice, t }.fire(&mut world, rng)?;
            }
        }
    }
    Ok(world)
}

/// Fraction of `n_samples` seeded worlds on which `event` holds.
pub fn query<F>(program: &Program, horizon: u32, event: F, n_samples: usize, seed: u64) -> Result<Estimate, DcError>
where
    F: Fn(&World) -> bool,
{
    query_with(program, horizon, event, n_samples, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn query_with<F, R>(program: &Program, horizon: u32, event: F, n_samples: usize, rng: &mut R) -> Result<Estimate, DcError>
where
    F: Fn(&World) -> bool,
    R: Rng + ?Sized,
{
    let mut hits = 0usize;
    for _ in 0..n_samples {
        if event(&sample_world_with(program, horizon, rng)?) {
            hits += 1;
        }
    }
    let n = n_samples.max(1) as f64;
    let p = hits as f64 / n;
    Ok(Estimate {
        probability: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dclite::{example_dynamics_program, example_objects_program, CmpOp, DistSpec};

    #[test]
    fn positions_defined_exactly_for_one_to_n() {
        let program = example_objects_program();
        for seed in 0..50 {
            let w = sample_world(&program, 0, seed).unwrap();
            let n = w.get("n", &[], None).unwrap().as_int().unwrap();
            let defined: Vec<i64> = w
                .groundings("pos", None)
                .map(|(k, _)| match k {
                    [Atom::Int(i)] => *i,
                    _ => panic!("bad key"),
                })
                .collect();
            assert_eq!(defined, (1..=n).collect::<Vec<_>>());
            for (_, v) in w.groundings("pos", None) {
                let x = v.as_f64().unwrap();
                assert!(x >= 0.0 && x < n as f64);
            }
            // left(A,B) is defined iff pos(A) < pos(B)
            for (key, _) in w.groundings("left", None) {
                let (a, b) = (&key[0], &key[1]);
                let pa = w.get("pos", std::slice::from_ref(a), None).unwrap().as_f64().unwrap();
                let pb = w.get("pos", std::slice::from_ref(b), None).unwrap().as_f64().unwrap();
                assert!(pa < pb);
            }
        }
    }

    #[test]
    fn determinism() {
        let program = example_dynamics_program(0.5);
        assert_eq!(sample_world(&program, 10, 9).unwrap(), sample_world(&program, 10, 9).unwrap());
        assert_ne!(sample_world(&program, 10, 9).unwrap(), sample_world(&program, 10, 10).unwrap());
    }

    #[test]
    fn noise_free_dynamics_step_by_three() {
        let program = example_dynamics_program(0.0);
        let w = sample_world(&program, 100, 4).unwrap();
        let n = w.get("n", &[], None).unwrap().as_int().unwrap();
        for p in 1..=n {
            let key = [Atom::Int(p)];
            for t in 0..100 {
                let now = w.get("pos", &key, Some(t)).unwrap().as_f64().unwrap();
                let next = w.get("pos", &key, Some(t + 1)).unwrap().as_f64().unwrap();
                assert_eq!(next, now + 3.0);
            }
        }
    }

    #[test]
    fn transitions_do_not_touch_slice_zero() {
        let a = example_dynamics_program(0.1);
        let mut b = a.clone();
        b.transition[0].dist.params[0] = Expr::Op(BinOp::Mul, Box::new(Expr::var("X")), Box::new(Expr::Int(-2)));
        for seed in 0..20 {
            let wa = sample_world(&a, 5, seed).unwrap();
            let wb = sample_world(&b, 5, seed).unwrap();
            let slice0 = |w: &World| w.groundings("pos", Some(0)).map(|(k, v)| (k.to_vec(), v.clone())).collect::<Vec<_>>();
            assert_eq!(slice0(&wa), slice0(&wb));
            assert_eq!(wa.get("n", &[], None), wb.get("n", &[], None));
        }
    }

    #[test]
    fn unbound_variable_names_clause() {
        let program = Program {
            static_clauses: vec![Clause::new("x", DistSpec { tag: DistTag::Poisson, params: vec![Expr::Int(2)] })
                .when(Condition::Compare { cmp: CmpOp::Lt, lhs: Expr::var("Y"), rhs: Expr::Int(3) })],
            ..Program::default()
        };
        let err = sample_world(&program, 0, 0).unwrap_err();
        assert_eq!(err, DcError::Unbound { clause: "x".into(), var: "Y".into() });
    }

    #[test]
    fn trivial_queries() {
        let program = example_objects_program();
        let p = query(&program, 0, |_| true, 200, 1).unwrap();
        assert_eq!(p.probability, 1.0);
        let nonneg = query(&program, 0, |w| w.get("n", &[], None).and_then(Value::as_int).is_some_and(|n| n >= 0), 500, 2).unwrap();
        assert_eq!(nonneg.probability, 1.0);
        assert!(p.std_error <= 0.5 / (200f64).sqrt());
    }
}
