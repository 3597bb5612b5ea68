use std::num::ParseIntError;

/// `"2,4,8"` into a list.
pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    let out: Result<Vec<usize>, ParseIntError> = s.split(',').map(|p| p.trim().parse()).collect();
    let out = out.map_err(|e| format!("bad list `{s}`: {e}"))?;
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// `start:end:step` (end inclusive), `start:end` (step 1), or a single value.
pub fn parse_range(s: &str) -> Result<Vec<usize>, String> {
    let parts: Result<Vec<usize>, ParseIntError> = s.split(':').map(|p| p.trim().parse()).collect();
    let parts = parts.map_err(|e| format!("bad range `{s}`: {e}"))?;
    let (start, end, step) = match parts[..] {
        [v] => (v, v, 1),
        [a, b] => (a, b, 1),
        [a, b, c] => (a, b, c),
        _ => return Err(format!("bad range `{s}`: expected start:end[:step]")),
    };
    if step == 0 || start > end {
        return Err(format!("bad range `{s}`: need start <= end and step >= 1"));
    }
    Ok((start..=end).step_by(step).collect())
}
