use std::str::FromStr;

use super::{Atom, CmpOp, DcError, Value, World};

/// A query event over one sampled world.
///
/// Textual form: `true`, `false`, or conjunctions (`&`) of comparisons
/// `name(arg, ...)@time op value`, e.g. `left(1,2) == t` or `pos(1)@3 > 2`.
/// A comparison on a variable that is not defined in the world is false.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    True,
    False,
    Cmp {
        name: String,
        args: Vec<Atom>,
        time: Option<u32>,
        op: CmpOp,
        value: Value,
    },
    And(Vec<Event>),
}

impl Event {
    pub fn holds(&self, world: &World) -> bool {
        match self {
            Event::True => true,
            Event::False => false,
            Event::Cmp { name, args, time, op, value } => {
                world.get(name, args, *time).is_some_and(|v| op.apply(v, value))
            }
            Event::And(parts) => parts.iter().all(|e| e.holds(world)),
        }
    }
}

fn parse_atom(s: &str) -> Atom {
    match s.parse::<i64>() {
        Ok(i) => Atom::Int(i),
        Err(_) => Atom::Sym(s.to_string()),
    }
}

fn parse_value(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        Value::Int(i)
    } else if let Ok(x) = s.parse::<f64>() {
        Value::Real(x)
    } else {
        Value::Sym(s.to_string())
    }
}

fn parse_cmp(text: &str) -> Result<Event, DcError> {
    let bad = || DcError::Event(text.to_string());
    // two-character operators first
    const OPS: [(&str, CmpOp); 7] = [
        ("<=", CmpOp::Le),
        (">=", CmpOp::Ge),
        ("==", CmpOp::Eq),
        ("!=", CmpOp::Ne),
        ("<", CmpOp::Lt),
        (">", CmpOp::Gt),
        ("=", CmpOp::Eq),
    ];
    let (pos, sym, op) = OPS
        .iter()
        .filter_map(|(sym, op)| text.find(sym).map(|p| (p, *sym, *op)))
        .min_by_key(|(p, sym, _)| (*p, std::cmp::Reverse(sym.len())))
        .ok_or_else(bad)?;
    let (lhs, rhs) = (text[..pos].trim(), text[pos + sym.len()..].trim());
    if lhs.is_empty() || rhs.is_empty() {
        return Err(bad());
    }

    let (lhs, time) = match lhs.rsplit_once('@') {
        Some((l, t)) => (l.trim(), Some(t.trim().parse::<u32>().map_err(|_| bad())?)),
        None => (lhs, None),
    };
    let (name, args) = match lhs.split_once('(') {
        Some((name, rest)) => {
            let inner = rest.strip_suffix(')').ok_or_else(bad)?;
            let args = if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner.split(',').map(|a| parse_atom(a.trim())).collect()
            };
            (name.trim(), args)
        }
        None => (lhs, Vec::new()),
    };
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Err(bad());
    }
    Ok(Event::Cmp {
        name: name.to_string(),
        args,
        time,
        op,
        value: parse_value(rhs),
    })
}

impl FromStr for Event {
    type Err = DcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('&').map(str::trim).collect();
        let mut events = Vec::with_capacity(parts.len());
        for part in parts {
            events.push(match part {
                "true" => Event::True,
                "false" => Event::False,
                "" => return Err(DcError::Event(s.to_string())),
                other => parse_cmp(other)?,
            });
        }
        Ok(if events.len() == 1 { events.pop().unwrap() } else { Event::And(events) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dclite::{example_objects_program, sample_world};

    #[test]
    fn parses_forms() {
        assert_eq!("true".parse::<Event>().unwrap(), Event::True);
        assert_eq!(
            "left(1,2) = t".parse::<Event>().unwrap(),
            Event::Cmp {
                name: "left".into(),
                args: vec![Atom::Int(1), Atom::Int(2)],
                time: None,
                op: CmpOp::Eq,
                value: Value::sym("t"),
            }
        );
        assert_eq!(
            "pos(1)@3 >= 2.5".parse::<Event>().unwrap(),
            Event::Cmp {
                name: "pos".into(),
                args: vec![Atom::Int(1)],
                time: Some(3),
                op: CmpOp::Ge,
                value: Value::Real(2.5),
            }
        );
        assert!(matches!("n >= 0 & n < 3".parse::<Event>().unwrap(), Event::And(v) if v.len() == 2));
        for bad in ["", "n", "(1) = 2", "pos(1 = 2", "pos(1)@x > 2", "n >="] {
            assert!(bad.parse::<Event>().is_err(), "{bad}");
        }
    }

    #[test]
    fn undefined_variables_are_false() {
        let program = example_objects_program();
        let world = sample_world(&program, 0, 0).unwrap();
        let ev: Event = "pos(1000) >= 0".parse().unwrap();
        assert!(!ev.holds(&world));
        let ev: Event = "n >= 0".parse().unwrap();
        assert!(ev.holds(&world));
    }
}
