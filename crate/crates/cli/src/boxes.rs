//! Box list files: one `left top right bottom [category]` per line; blank
//! lines and lines starting with `#` are ignored.

use objdist::kitti_io::BBox2;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxEntry {
    pub bbox: BBox2,
    pub category: Option<String>,
}

pub fn parse_boxes(text: &str) -> Result<Vec<BoxEntry>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 && toks.len() != 5 {
            return Err(format!("line {}: expected 4 coordinates and an optional category", i + 1));
        }
        let mut v = [0.0; 4];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("line {}: bad coordinate {tok:?}", i + 1))?;
        }
        if v[2] <= v[0] || v[3] <= v[1] {
            return Err(format!("line {}: box must have right > left and bottom > top", i + 1));
        }
        out.push(BoxEntry {
            bbox: BBox2::new(v[0], v[1], v[2], v[3]),
            category: toks.get(4).map(|s| s.to_string()),
        });
    }
    Ok(out)
}
