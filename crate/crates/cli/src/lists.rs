use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A list of numbers written either as `a,b,c` or as an inclusive
/// `start:stop:step` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NumList(pub Vec<f64>);

/// Rounds away float noise such as `0.30000000000000004`.
fn tidy(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

impl FromStr for NumList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{t}` is not a number"))
                .and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(format!("`{t}` is not finite"))
                    }
                })
        };
        if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            let [start, stop, step] = parts[..] else {
                return Err(format!("range `{s}` must look like start:stop:step"));
            };
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                return Err(format!("range `{s}` needs step > 0 and stop ≥ start"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            if n > 1_000_000 {
                return Err(format!("range `{s}` has too many points"));
            }
            Ok(NumList(
                (0..=n).map(|i| tidy(start + i as f64 * step)).collect(),
            ))
        } else {
            let v = s.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
            if v.is_empty() {
                return Err("empty list".into());
            }
            Ok(NumList(v))
        }
    }
}

impl fmt::Display for NumList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(f64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comma_lists() {
        assert_eq!(
            "0.001,0.01".parse::<NumList>().unwrap().0,
            vec![0.001, 0.01]
        );
        assert_eq!("0".parse::<NumList>().unwrap().0, vec![0.0]);
        assert!("0.1,x".parse::<NumList>().is_err());
        assert!("".parse::<NumList>().is_err());
        assert!("nan".parse::<NumList>().is_err());
    }

    #[test]
    fn ranges() {
        let r = "0.1:0.9:0.1".parse::<NumList>().unwrap().0;
        assert_eq!(r, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(
            "0:1:0.25".parse::<NumList>().unwrap().0,
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(
            "0:1:0.3".parse::<NumList>().unwrap().0,
            vec![0.0, 0.3, 0.6, 0.9]
        );
        assert!("1:0:0.1".parse::<NumList>().is_err());
        assert!("0:1:0".parse::<NumList>().is_err());
        assert!("0:1".parse::<NumList>().is_err());
    }
}
