use std::path::Path;

use super::{Editor, IdentityEditor, LossyCodecWrapper, MockEditor, RemoteEditor};
use crate::color::ColorTransform;
use crate::error::{Error, Result};
use crate::image::Image;

/// Builds an editor from a selection string:
///
/// * `identity`
/// * `hue:<degrees>:<rho_view>:<rho_call>`
/// * `affine:<12 comma-separated floats>:<rho_view>:<rho_call>`
/// * `uncond:<png path>`
/// * `lossy:<inner selection>`
/// * `remote:<url>`
pub fn parse_editor(selection: &str) -> Result<Box<dyn Editor>> {
    let bad = || Error::InvalidSelection(selection.to_string());
    let (kind, rest) = selection.split_once(':').unwrap_or((selection, ""));
    match kind {
        "identity" if rest.is_empty() => Ok(Box::new(IdentityEditor::new())),
        "hue" => {
            let [deg, rv, rc] = floats::<3>(rest).ok_or_else(bad)?;
            Ok(Box::new(MockEditor::new(
                ColorTransform::Hue { degrees: deg },
                rv,
                rc,
            )))
        }
        "affine" => {
            let parts: Vec<&str> = rest.split(':').collect();
            let [m, rv, rc] = parts[..] else {
                return Err(bad());
            };
            let matrix: [f64; 12] = m
                .split(',')
                .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(bad)?;
            let [rv, rc] = floats::<2>(&format!("{rv}:{rc}")).ok_or_else(bad)?;
            Ok(Box::new(MockEditor::new(
                ColorTransform::Affine { matrix },
                rv,
                rc,
            )))
        }
        "uncond" if !rest.is_empty() => {
            let target = Image::read_png(Path::new(rest))?;
            Ok(Box::new(MockEditor::unconditioned(target, 0.0, 0.0)))
        }
        "lossy" if !rest.is_empty() => Ok(Box::new(LossyCodecWrapper::new(parse_editor(rest)?))),
        "remote" if !rest.is_empty() => Ok(Box::new(RemoteEditor::new(rest))),
        _ => Err(bad()),
    }
}

fn floats<const N: usize>(s: &str) -> Option<[f64; N]> {
    let v: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<_>>()?;
    let out: [f64; N] = v.try_into().ok()?;
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_grammar() {
        assert_eq!(parse_editor("identity").unwrap().describe(), "identity");
        assert!(parse_editor("hue:120:0.1:0.05")
            .unwrap()
            .describe()
            .starts_with("mock(Hue"));
        let affine = "affine:1,0,0,0,0,1,0,0,0,0,1,0.1:0:0";
        assert!(parse_editor(affine).unwrap().describe().contains("Affine"));
        assert_eq!(
            parse_editor("lossy:identity").unwrap().describe(),
            "lossy(identity)"
        );
        assert_eq!(
            parse_editor("remote:http://127.0.0.1:9/")
                .unwrap()
                .describe(),
            "remote(http://127.0.0.1:9)"
        );
    }

    #[test]
    fn rejects_malformed_selections() {
        for s in [
            "",
            "hue",
            "hue:120",
            "hue:120:0.1:x",
            "hue:nan:0:0",
            "affine:1,2,3:0:0",
            "affine:1,0,0,0,0,1,0,0,0,0,1,0",
            "lossy:",
            "identity:3",
            "blur:2",
        ] {
            assert!(
                matches!(parse_editor(s), Err(Error::InvalidSelection(_))),
                "{s}"
            );
        }
        assert!(matches!(
            parse_editor("uncond:/nonexistent/target.png"),
            Err(Error::MissingFile(_))
        ));
    }
}
