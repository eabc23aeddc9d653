//! Argument parsers: existing paths and integer lists such as `2..7` or `2,4,6`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use hurdlecast_core::eval::SUPPORTED_STEPS;
use hurdlecast_core::panel::Month;

pub fn existing_file(s: &str) -> Result<PathBuf, String> {
    let path = PathBuf::from(s);
    if path.is_file() {
        Ok(path)
    } else {
        Err(format!("no such file: {s}"))
    }
}

/// Inclusive ranges and single values, comma separated; sorted, duplicates dropped.
fn list<T>(s: &str) -> Result<Vec<T>, String>
where
    T: FromStr + Ord + Copy + std::ops::Add<Output = T> + From<u8>,
{
    let number = |v: &str| v.trim().parse::<T>().map_err(|_| format!("`{v}` is not an integer"));
    let mut out = BTreeSet::new();
    for part in s.split(',') {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (number(a)?, number(b)?);
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                let mut v = a;
                while v <= b {
                    out.insert(v);
                    v = v + T::from(1);
                }
            }
            None => {
                out.insert(number(part)?);
            }
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out.into_iter().collect())
}

pub fn step(s: &str) -> Result<u32, String> {
    let v: u32 = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if SUPPORTED_STEPS.contains(&v) {
        Ok(v)
    } else {
        Err(format!("step {v} is not supported; use 2 to 7"))
    }
}

/// Parsed `--steps` list.
#[derive(Debug, Clone, PartialEq)]
pub struct Steps(pub Vec<u32>);

/// Parsed `--eval-months` list.
#[derive(Debug, Clone, PartialEq)]
pub struct Months(pub Vec<Month>);

pub fn steps(s: &str) -> Result<Steps, String> {
    let v: Vec<u32> = list(s)?;
    match v.iter().find(|s| !SUPPORTED_STEPS.contains(s)) {
        Some(bad) => Err(format!("step {bad} is not supported; use 2 to 7")),
        None => Ok(Steps(v)),
    }
}

pub fn months(s: &str) -> Result<Months, String> {
    let v: Vec<Month> = list(s)?;
    if v[0] < 0 {
        return Err(format!("negative month {}", v[0]));
    }
    Ok(Months(v))
}
