//! Binary little-endian PLY export/import for Gaussian sets, compatible
//! with common splat viewers. Opacity is stored as a logit, scales as logs,
//! higher-order SH channel-major under `f_rest_*`.

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian, GaussianSet};
use crate::sh::num_coeffs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

fn logit(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

pub fn write_ply(set: &GaussianSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pathstr = path.display().to_string();
    let nsh = num_coeffs(set.sh_degree);
    let nrest = nsh - 1;
    let file = std::fs::File::create(path).map_err(|e| Error::io(&pathstr, e))?;
    let mut out = BufWriter::new(file);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", set.len()));
    for p in ["x", "y", "z"] {
        header.push_str(&format!("property float {p}\n"));
    }
    for i in 0..3 {
        header.push_str(&format!("property float f_dc_{i}\n"));
    }
    for i in 0..nrest * 3 {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    header.push_str("property float opacity\n");
    for i in 0..3 {
        header.push_str(&format!("property float scale_{i}\n"));
    }
    for i in 0..4 {
        header.push_str(&format!("property float rot_{i}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())
        .map_err(|e| Error::io(&pathstr, e))?;
    let mut buf = Vec::with_capacity(set.len() * (17 + nrest * 3) * 4);
    for g in &set.gaussians {
        for v in g.center {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for ch in 0..3 {
            buf.extend_from_slice(&g.sh[0][ch].to_le_bytes());
        }
        // Channel-major: all of channel 0's rest coefficients, then 1, 2.
        for ch in 0..3 {
            for band in 1..nsh {
                buf.extend_from_slice(&g.sh[band][ch].to_le_bytes());
            }
        }
        buf.extend_from_slice(&logit(g.opacity).to_le_bytes());
        for s in g.scale {
            buf.extend_from_slice(&s.max(1e-12).ln().to_le_bytes());
        }
        for q in g.rotation {
            buf.extend_from_slice(&q.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io(&pathstr, e))?;
    Ok(())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianSet<f32>> {
    let path = path.as_ref();
    let pathstr = path.display().to_string();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&pathstr, e))?;
    let header_end = find_header_end(&buf)
        .ok_or_else(|| Error::format(&pathstr, "missing end_header"))?;
    let header = std::str::from_utf8(&buf[..header_end])
        .map_err(|_| Error::format(&pathstr, "non-UTF-8 header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(&pathstr, "not a PLY file"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        let line = line.trim();
        if let Some(fmt) = line.strip_prefix("format ") {
            if !fmt.starts_with("binary_little_endian") {
                return Err(Error::format(&pathstr, format!("unsupported format `{fmt}`")));
            }
        } else if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.parse()
                    .map_err(|_| Error::format(&pathstr, "bad vertex count"))?,
            );
        } else if line.starts_with("element ") {
            return Err(Error::format(&pathstr, format!("unsupported {line}")));
        } else if let Some(p) = line.strip_prefix("property float ") {
            props.push(p.to_string());
        } else if line.starts_with("property ") {
            return Err(Error::format(&pathstr, "only float properties supported"));
        }
    }
    let count = count.ok_or_else(|| Error::format(&pathstr, "missing element vertex"))?;
    let nrest3 = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    if nrest3 % 3 != 0 {
        return Err(Error::format(&pathstr, "f_rest count not divisible by 3"));
    }
    let nsh = nrest3 / 3 + 1;
    let sh_degree = match nsh {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        other => {
            return Err(Error::format(
                &pathstr,
                format!("unsupported SH coefficient count {other}"),
            ))
        }
    };
    let expected: Vec<String> = {
        let mut v: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        for i in 0..3 {
            v.push(format!("f_dc_{i}"));
        }
        for i in 0..nrest3 {
            v.push(format!("f_rest_{i}"));
        }
        v.push("opacity".into());
        for i in 0..3 {
            v.push(format!("scale_{i}"));
        }
        for i in 0..4 {
            v.push(format!("rot_{i}"));
        }
        v
    };
    if props != expected {
        return Err(Error::format(&pathstr, "unexpected property layout"));
    }
    let stride = props.len() * 4;
    let payload = &buf[header_end..];
    if payload.len() < count * stride {
        return Err(Error::format(&pathstr, "truncated vertex data"));
    }
    let mut gaussians = Vec::with_capacity(count);
    for rec in payload.chunks_exact(stride).take(count) {
        let f = |i: usize| {
            f32::from_le_bytes([rec[i * 4], rec[i * 4 + 1], rec[i * 4 + 2], rec[i * 4 + 3]])
        };
        let center = [f(0), f(1), f(2)];
        let mut sh = vec![[0.0f32; 3]; nsh];
        for ch in 0..3 {
            sh[0][ch] = f(3 + ch);
        }
        let rest_base = 6;
        for ch in 0..3 {
            for band in 1..nsh {
                sh[band][ch] = f(rest_base + ch * (nsh - 1) + (band - 1));
            }
        }
        let opacity_logit = f(rest_base + nrest3);
        let sbase = rest_base + nrest3 + 1;
        let scale = [f(sbase).exp(), f(sbase + 1).exp(), f(sbase + 2).exp()];
        let rotation = [f(sbase + 3), f(sbase + 4), f(sbase + 5), f(sbase + 6)];
        gaussians.push(Gaussian {
            center,
            opacity: 1.0 / (1.0 + (-opacity_logit).exp()),
            scale,
            rotation,
            sh,
        });
    }
    Ok(GaussianSet {
        gaussians,
        sh_degree,
    })
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    let needle = b"end_header\n";
    buf.windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianSet<f32> {
        let nsh = num_coeffs(degree);
        let gaussians = (0..n)
            .map(|_| {
                let q: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let qn = q.iter().map(|v| v * v).sum::<f32>().sqrt();
                Gaussian {
                    center: std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
                    opacity: rng.gen_range(0.05..0.95),
                    scale: std::array::from_fn(|_| rng.gen_range(0.01..1.0)),
                    rotation: q.map(|v| v / qn),
                    sh: (0..nsh)
                        .map(|_| std::array::from_fn(|_| rng.gen_range(-0.5..0.5)))
                        .collect(),
                }
            })
            .collect();
        GaussianSet {
            gaussians,
            sh_degree: degree,
        }
    }

    #[test]
    fn roundtrip_all_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for degree in 0..=3 {
            let set = random_set(&mut rng, 17, degree);
            write_ply(&set, &path).unwrap();
            let back = read_ply(&path).unwrap();
            assert_eq!(back.sh_degree, degree);
            assert_eq!(back.len(), set.len());
            for (a, b) in set.gaussians.iter().zip(&back.gaussians) {
                for i in 0..3 {
                    assert_eq!(a.center[i], b.center[i]);
                    // scale goes through log/exp, opacity through logit/sigmoid
                    assert_relative_eq!(a.scale[i], b.scale[i], epsilon = 1e-5);
                }
                assert_relative_eq!(a.opacity, b.opacity, epsilon = 1e-5);
                assert_eq!(a.rotation, b.rotation);
                for (sa, sb) in a.sh.iter().zip(&b.sh) {
                    assert_eq!(sa, sb);
                }
            }
        }
    }

    #[test]
    fn empty_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        let set = GaussianSet::<f32> {
            gaussians: vec![],
            sh_degree: 1,
        };
        write_ply(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0"));
        let back = read_ply(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn degree1_has_nine_rest_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let set = random_set(&mut rng, 1, 1);
        write_ply(&set, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = find_header_end(&bytes).unwrap();
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let rest_count = header.matches("property float f_rest_").count();
        assert_eq!(rest_count, 9);
    }

    #[test]
    fn malformed_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, b"not a ply at all").unwrap();
        assert!(read_ply(&path).is_err());
        std::fs::write(&path, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
        assert!(read_ply(&path).is_err());
    }
}
