//! Locating `\includegraphics` commands in parsed TeX and pairing them
//! with captions.
//!
//! A graphic becomes a candidate only when its neighborhood — the sibling
//! nodes inside the nearest enclosing environment or group — contains a
//! caption and no other graphic. Nested environments form their own
//! neighborhoods, which is what makes subfigures pair with their own
//! captions rather than the parent figure's.

pub mod parse;

pub use parse::{decode_tex, parse_tex, ParsedTex, Span, TexCommand, TexNode};

use serde::Serialize;

use crate::ingest::{normalize_member_path, MemberKind, PaperArchive};

/// Extension order tried when an `\includegraphics` path has none.
pub const RESOLVE_EXTENSION_ORDER: [&str; 7] = ["pdf", "png", "jpg", "jpeg", "gif", "eps", "ps"];

/// A matched (graphic, caption) pair prior to normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FigureCandidate {
    pub paper_id: String,
    /// Path of the `.tex` member the match came from; for JATS figures,
    /// the `.nxml` member.
    pub tex_path: String,
    /// Resolved member path of the graphic.
    pub graphics_path: String,
    /// Raw caption source (LaTeX for arXiv, plaintext for JATS).
    pub caption_source: String,
    /// For arXiv: byte span of the caption argument in the decoded source.
    /// For JATS: (figure index, graphic index) in document order.
    pub caption_span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    MissingFile,
    NoCaption,
    MultipleGraphics,
}

/// One non-matching `\includegraphics`, with the first rule it failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub span: Span,
    pub reason: RejectionReason,
    /// Extra context, e.g. the unresolved path or an ambiguity note.
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Found(String),
    NotFound,
    /// Case-insensitive matching hit more than one member.
    Ambiguous(Vec<String>),
}

/// Resolve an `\includegraphics` argument against the archive member set.
///
/// The raw argument is trimmed and normalized. A path with an extension is
/// looked up as-is; an extensionless path tries the whitelist extensions
/// in [`RESOLVE_EXTENSION_ORDER`]. Each lookup is exact-case first, then a
/// unique case-insensitive match.
pub fn resolve_graphics_path(raw: &str, archive: &PaperArchive) -> Resolution {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Resolution::NotFound;
    }
    let Some(normalized) = normalize_member_path(trimmed) else {
        return Resolution::NotFound;
    };

    let has_extension = normalized
        .rsplit('/')
        .next()
        .map(|seg| seg[1..].contains('.'))
        .unwrap_or(false);

    let candidates: Vec<String> = if has_extension {
        vec![normalized]
    } else {
        RESOLVE_EXTENSION_ORDER
            .iter()
            .map(|ext| format!("{normalized}.{ext}"))
            .collect()
    };

    for candidate in &candidates {
        if let Some(member) = archive.member(candidate) {
            if matches!(member.kind, MemberKind::Image(_)) {
                return Resolution::Found(candidate.clone());
            }
        }
        let lower = candidate.to_ascii_lowercase();
        let ci_hits: Vec<String> = archive
            .members()
            .filter(|m| {
                matches!(m.kind, MemberKind::Image(_)) && m.path.to_ascii_lowercase() == lower
            })
            .map(|m| m.path.clone())
            .collect();
        match ci_hits.len() {
            0 => {}
            1 => return Resolution::Found(ci_hits.into_iter().next().unwrap()),
            _ => return Resolution::Ambiguous(ci_hits),
        }
    }
    Resolution::NotFound
}

/// Query a parsed tree for figure candidates under the neighborhood rules.
///
/// For an `\includegraphics` node G, all of the following must hold:
/// the required argument resolves to an existing image member, some
/// sibling is a `\caption` with non-empty text, and no sibling is another
/// `\includegraphics`. The caption chosen is the nearest following
/// sibling, else the nearest preceding one. Rules are checked in that
/// order and the first failure becomes the rejection reason.
pub fn find_figure_candidates(
    tree: &ParsedTex,
    archive: &PaperArchive,
    tex_path: &str,
) -> (Vec<FigureCandidate>, Vec<Rejection>) {
    let mut candidates = Vec::new();
    let mut rejections = Vec::new();
    walk_scope(
        &tree.root,
        archive,
        tex_path,
        &mut candidates,
        &mut rejections,
    );
    (candidates, rejections)
}

fn walk_scope(
    siblings: &[TexNode],
    archive: &PaperArchive,
    tex_path: &str,
    candidates: &mut Vec<FigureCandidate>,
    rejections: &mut Vec<Rejection>,
) {
    let graphics: Vec<(usize, &TexCommand)> = siblings
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n {
            TexNode::Command(c) if c.name == "includegraphics" => Some((i, c)),
            _ => None,
        })
        .collect();
    let captions: Vec<(usize, &TexCommand)> = siblings
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n {
            TexNode::Command(c) if c.name == "caption" || c.name == "caption*" => {
                let non_empty = c
                    .first_required_arg()
                    .map(|a| !a.text.trim().is_empty())
                    .unwrap_or(false);
                non_empty.then_some((i, c))
            }
            _ => None,
        })
        .collect();

    // Emit results interleaved with nested-scope recursion so the final
    // order is source order.
    for (idx, node) in siblings.iter().enumerate() {
        match node {
            TexNode::Environment(env) => {
                walk_scope(&env.children, archive, tex_path, candidates, rejections);
            }
            TexNode::Group { children, .. } => {
                walk_scope(children, archive, tex_path, candidates, rejections);
            }
            TexNode::Command(cmd) if cmd.name == "includegraphics" => {
                match evaluate_graphic(idx, cmd, &graphics, &captions, archive) {
                    Ok((path, caption)) => candidates.push(FigureCandidate {
                        paper_id: archive.paper_id.clone(),
                        tex_path: tex_path.to_string(),
                        graphics_path: path,
                        caption_source: caption.0,
                        caption_span: caption.1,
                    }),
                    Err(rejection) => rejections.push(rejection),
                }
            }
            _ => {}
        }
    }
}

fn evaluate_graphic(
    idx: usize,
    cmd: &TexCommand,
    graphics: &[(usize, &TexCommand)],
    captions: &[(usize, &TexCommand)],
    archive: &PaperArchive,
) -> Result<(String, (String, Span)), Rejection> {
    let raw = cmd
        .first_required_arg()
        .map(|a| a.text.clone())
        .unwrap_or_default();
    let resolved = match resolve_graphics_path(&raw, archive) {
        Resolution::Found(path) => path,
        Resolution::NotFound => {
            return Err(Rejection {
                span: cmd.span,
                reason: RejectionReason::MissingFile,
                detail: Some(raw),
            })
        }
        Resolution::Ambiguous(hits) => {
            return Err(Rejection {
                span: cmd.span,
                reason: RejectionReason::MissingFile,
                detail: Some(format!(
                    "ambiguous case-insensitive match for {raw}: {}",
                    hits.join(", ")
                )),
            })
        }
    };

    if captions.is_empty() {
        return Err(Rejection {
            span: cmd.span,
            reason: RejectionReason::NoCaption,
            detail: None,
        });
    }

    if graphics.len() > 1 {
        return Err(Rejection {
            span: cmd.span,
            reason: RejectionReason::MultipleGraphics,
            detail: Some(format!("{} graphics share the neighborhood", graphics.len())),
        });
    }

    let chosen = captions
        .iter()
        .filter(|(ci, _)| *ci > idx)
        .min_by_key(|(ci, _)| *ci)
        .or_else(|| {
            captions
                .iter()
                .filter(|(ci, _)| *ci < idx)
                .max_by_key(|(ci, _)| *ci)
        })
        .expect("captions is non-empty");
    let arg = chosen
        .1
        .first_required_arg()
        .expect("caption filter requires a non-empty argument");
    Ok((resolved, (arg.text.trim().to_string(), arg.span)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{classify_member, ArchiveMember};

    fn archive_with(paths: &[&str]) -> PaperArchive {
        let mut archive = PaperArchive::new("2001.00001");
        for p in paths {
            archive.insert(
                ArchiveMember {
                    path: p.to_string(),
                    size_bytes: 1,
                    kind: classify_member(p),
                },
                vec![0u8],
            );
        }
        archive
    }

    fn run(src: &str, paths: &[&str]) -> (Vec<FigureCandidate>, Vec<Rejection>) {
        let tree = parse_tex(src);
        let archive = archive_with(paths);
        find_figure_candidates(&tree, &archive, "main.tex")
    }

    #[test]
    fn single_graphic_with_caption_matches() {
        let (cands, rejs) = run(
            "\\begin{figure}\\includegraphics{a.png}\\caption{C}\\end{figure}",
            &["a.png"],
        );
        assert_eq!(rejs.len(), 0);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].graphics_path, "a.png");
        assert_eq!(cands[0].caption_source, "C");
    }

    #[test]
    fn two_graphics_one_caption_rejects_both() {
        let (cands, rejs) = run(
            "\\begin{figure}\\includegraphics{a.png}\\includegraphics{b.png}\\caption{C}\\end{figure}",
            &["a.png", "b.png"],
        );
        assert!(cands.is_empty());
        assert_eq!(rejs.len(), 2);
        assert!(rejs
            .iter()
            .all(|r| r.reason == RejectionReason::MultipleGraphics));
    }

    #[test]
    fn subfigures_pair_with_their_own_captions() {
        let src = "\\begin{figure}\
            \\begin{subfigure}\\includegraphics{a.png}\\caption{A}\\end{subfigure}\
            \\begin{subfigure}\\includegraphics{b.png}\\caption{B}\\end{subfigure}\
            \\caption{P}\\end{figure}";
        let (cands, rejs) = run(src, &["a.png", "b.png"]);
        assert_eq!(rejs.len(), 0);
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].caption_source, "A");
        assert_eq!(cands[1].caption_source, "B");
        assert!(cands.iter().all(|c| c.caption_source != "P"));
    }

    #[test]
    fn newcommand_aliases_are_not_detected() {
        let src = "\\newcommand{\\incg}{\\includegraphics}\
            \\begin{figure}\\incg{a.png}\\caption{C}\\end{figure}";
        let (cands, rejs) = run(src, &["a.png"]);
        assert!(cands.is_empty());
        assert!(rejs.is_empty());
    }

    #[test]
    fn missing_file_is_rejected() {
        let (cands, rejs) = run(
            "\\begin{figure}\\includegraphics{missing.png}\\caption{C}\\end{figure}",
            &["a.png"],
        );
        assert!(cands.is_empty());
        assert_eq!(rejs.len(), 1);
        assert_eq!(rejs[0].reason, RejectionReason::MissingFile);
    }

    #[test]
    fn no_caption_is_rejected() {
        let (cands, rejs) = run(
            "\\begin{figure}\\includegraphics{a.png}\\end{figure}",
            &["a.png"],
        );
        assert!(cands.is_empty());
        assert_eq!(rejs[0].reason, RejectionReason::NoCaption);
    }

    #[test]
    fn empty_caption_counts_as_no_caption() {
        let (cands, rejs) = run(
            "\\begin{figure}\\includegraphics{a.png}\\caption{  }\\end{figure}",
            &["a.png"],
        );
        assert!(cands.is_empty());
        assert_eq!(rejs[0].reason, RejectionReason::NoCaption);
    }

    #[test]
    fn commented_out_graphic_is_invisible() {
        let with = "\\begin{figure}\\includegraphics{a.png}\\caption{C}\\end{figure}";
        let without = "\\begin{figure}%\\includegraphics{a.png}\n\\caption{C}\\end{figure}";
        let (c1, _) = run(with, &["a.png"]);
        let (c2, r2) = run(without, &["a.png"]);
        assert_eq!(c1.len(), 1);
        assert!(c2.is_empty());
        assert!(r2.is_empty());
    }

    #[test]
    fn environment_name_does_not_matter() {
        for env in ["figure", "wrapfigure", "myweirdenv"] {
            let src = format!(
                "\\begin{{{env}}}\\includegraphics{{a.png}}\\caption{{C}}\\end{{{env}}}"
            );
            let (cands, _) = run(&src, &["a.png"]);
            assert_eq!(cands.len(), 1, "env {env}");
        }
    }

    #[test]
    fn caption_preceding_graphic_is_used_when_none_follows() {
        let (cands, _) = run(
            "\\begin{figure}\\caption{Before}\\includegraphics{a.png}\\end{figure}",
            &["a.png"],
        );
        assert_eq!(cands[0].caption_source, "Before");
    }

    #[test]
    fn nearest_following_caption_wins() {
        let (cands, _) = run(
            "\\begin{figure}\\caption{Before}\\includegraphics{a.png}\\caption{After}\\caption{Later}\\end{figure}",
            &["a.png"],
        );
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].caption_source, "After");
    }

    #[test]
    fn graphic_at_top_level_uses_root_scope() {
        let (cands, _) = run("\\includegraphics{a.png}\\caption{Root}", &["a.png"]);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].caption_source, "Root");
    }

    #[test]
    fn parent_scope_does_not_see_nested_graphics() {
        // The figure scope holds one graphic; the group holds another.
        // Each neighborhood has exactly one and only the figure-level one
        // has a caption sibling.
        let src = "\\begin{figure}\\includegraphics{a.png}{\\includegraphics{b.png}}\\caption{C}\\end{figure}";
        let (cands, rejs) = run(src, &["a.png", "b.png"]);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].graphics_path, "a.png");
        assert_eq!(rejs.len(), 1);
        assert_eq!(rejs[0].reason, RejectionReason::NoCaption);
    }

    #[test]
    fn resolve_exact_match() {
        let archive = archive_with(&["fig/a.png"]);
        assert_eq!(
            resolve_graphics_path("fig/a.png", &archive),
            Resolution::Found("fig/a.png".into())
        );
    }

    #[test]
    fn resolve_extensionless_prefers_pdf() {
        let archive = archive_with(&["fig/a.pdf", "fig/a.png"]);
        assert_eq!(
            resolve_graphics_path("fig/a", &archive),
            Resolution::Found("fig/a.pdf".into())
        );
    }

    #[test]
    fn resolve_extension_order_table() {
        // Pairwise: earlier extension in the documented order always wins.
        let order = RESOLVE_EXTENSION_ORDER;
        for i in 0..order.len() {
            for j in (i + 1)..order.len() {
                let a = format!("x.{}", order[i]);
                let b = format!("x.{}", order[j]);
                let archive = archive_with(&[a.as_str(), b.as_str()]);
                assert_eq!(
                    resolve_graphics_path("x", &archive),
                    Resolution::Found(a.clone()),
                    "{} should beat {}",
                    order[i],
                    order[j]
                );
            }
        }
    }

    #[test]
    fn resolve_missing_is_not_found() {
        let archive = archive_with(&["a.png"]);
        assert_eq!(
            resolve_graphics_path("missing.png", &archive),
            Resolution::NotFound
        );
    }

    #[test]
    fn resolve_case_insensitive_unique() {
        let archive = archive_with(&["Fig/A.PNG"]);
        assert_eq!(
            resolve_graphics_path("fig/a.png", &archive),
            Resolution::Found("Fig/A.PNG".into())
        );
    }

    #[test]
    fn resolve_case_insensitive_ambiguous() {
        let archive = archive_with(&["a.PNG", "A.png"]);
        assert!(matches!(
            resolve_graphics_path("a.png", &archive),
            Resolution::Ambiguous(_)
        ));
    }

    #[test]
    fn resolve_non_image_member_is_not_found() {
        let archive = archive_with(&["main.tex"]);
        assert_eq!(
            resolve_graphics_path("main.tex", &archive),
            Resolution::NotFound
        );
    }

    #[test]
    fn resolve_traversal_is_not_found() {
        let archive = archive_with(&["a.png"]);
        assert_eq!(
            resolve_graphics_path("../a.png", &archive),
            Resolution::NotFound
        );
    }

    #[test]
    fn candidates_are_sound_and_ordered() {
        let src = "\\begin{figure}\\includegraphics{z.png}\\caption{Z}\\end{figure}\
                   \\begin{figure}\\includegraphics{a.png}\\caption{A}\\end{figure}";
        let (cands, _) = run(src, &["a.png", "z.png"]);
        assert_eq!(cands.len(), 2);
        // Source order, not path order.
        assert_eq!(cands[0].graphics_path, "z.png");
        assert_eq!(cands[1].graphics_path, "a.png");
    }
}
