//! PMC `.nxml` figure extraction.
//!
//! Figures are `fig` elements. A figure whose language attribute does not
//! start with `en` is skipped; an unmarked figure passes. Only graphics
//! that resolve to an existing `.jpg` member are kept (PMC `.gif` files
//! are thumbnail-sized). Multi-graphic figures emit one candidate per
//! graphic, each paired with the figure's caption.

use serde::Serialize;
use thiserror::Error;

use crate::ingest::PaperArchive;
use crate::tex::{FigureCandidate, Span};

const XML_NS: &str = "http://www.w3.org/XML/1998/namespace";

#[derive(Debug, Error)]
pub enum JatsError {
    #[error("malformed XML: {0}")]
    Xml(#[from] roxmltree::Error),
    #[error("unsupported XML encoding {0:?}")]
    UnsupportedEncoding(String),
    #[error("document is not valid text for its declared encoding")]
    BadText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JatsRejectionReason {
    NonEnglish,
    NoGraphic,
    NotJpg,
    MissingFile,
    NoCaption,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JatsRejection {
    pub fig_id: Option<String>,
    pub reason: JatsRejectionReason,
    pub detail: Option<String>,
}

/// One `fig` element as found in the document, before member resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JatsFigure {
    pub fig_id: Option<String>,
    pub lang: Option<String>,
    pub graphic_hrefs: Vec<String>,
    pub caption_text: String,
}

/// Decode `.nxml` bytes into text, honoring the XML declaration.
/// UTF-8 (with or without BOM), US-ASCII, and ISO-8859-1 are supported;
/// UTF-16 is handled via its BOM.
pub fn decode_xml(bytes: &[u8]) -> Result<String, JatsError> {
    if bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
        return std::str::from_utf8(&bytes[3..])
            .map(str::to_owned)
            .map_err(|_| JatsError::BadText);
    }
    if bytes.starts_with(&[0xFF, 0xFE]) || bytes.starts_with(&[0xFE, 0xFF]) {
        let be = bytes[0] == 0xFE;
        let units: Vec<u16> = bytes[2..]
            .chunks_exact(2)
            .map(|c| {
                if be {
                    u16::from_be_bytes([c[0], c[1]])
                } else {
                    u16::from_le_bytes([c[0], c[1]])
                }
            })
            .collect();
        return String::from_utf16(&units).map_err(|_| JatsError::BadText);
    }

    let declared = declared_encoding(bytes);
    match declared.as_deref() {
        None | Some("utf-8") | Some("utf8") | Some("us-ascii") | Some("ascii") => {
            std::str::from_utf8(bytes)
                .map(str::to_owned)
                .map_err(|_| JatsError::BadText)
        }
        Some("iso-8859-1") | Some("latin-1") | Some("latin1") => {
            Ok(bytes.iter().map(|&b| b as char).collect())
        }
        Some(other) => Err(JatsError::UnsupportedEncoding(other.to_string())),
    }
}

fn declared_encoding(bytes: &[u8]) -> Option<String> {
    let head = &bytes[..bytes.len().min(256)];
    let head = String::from_utf8_lossy(head);
    let decl_start = head.find("<?xml")?;
    let decl_end = head[decl_start..].find("?>")? + decl_start;
    let decl = &head[decl_start..decl_end];
    let enc_pos = decl.find("encoding")?;
    let rest = &decl[enc_pos + "encoding".len()..];
    let quote_pos = rest.find(['"', '\''])?;
    let quote = rest.as_bytes()[quote_pos] as char;
    let value_start = quote_pos + 1;
    let value_end = rest[value_start..].find(quote)? + value_start;
    Some(rest[value_start..value_end].to_ascii_lowercase())
}

/// Parse decoded `.nxml` text into a document tree.
pub fn parse_jats(text: &str) -> Result<roxmltree::Document<'_>, JatsError> {
    Ok(roxmltree::Document::parse(text)?)
}

/// Collect the `fig` elements of a document, in document order.
pub fn collect_figures(doc: &roxmltree::Document<'_>) -> Vec<JatsFigure> {
    doc.descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "fig")
        .map(|fig| {
            let lang = fig
                .attribute("lang")
                .or_else(|| fig.attribute((XML_NS, "lang")))
                .map(str::to_owned);
            let graphic_hrefs = fig
                .descendants()
                .filter(|n| n.is_element() && n.tag_name().name() == "graphic")
                .filter_map(graphic_href)
                .collect();
            let caption_text = fig
                .descendants()
                .find(|n| n.is_element() && n.tag_name().name() == "caption")
                .map(|c| caption_plaintext(&c))
                .unwrap_or_default();
            JatsFigure {
                fig_id: fig.attribute("id").map(str::to_owned),
                lang,
                graphic_hrefs,
                caption_text,
            }
        })
        .collect()
}

fn graphic_href(node: roxmltree::Node<'_, '_>) -> Option<String> {
    node.attributes()
        .find(|a| a.name() == "href")
        .map(|a| a.value().to_string())
}

/// Concatenated descendant text of a caption element, with `xref`
/// subtrees replaced by the literal `<ref>` for consistency with the
/// arXiv subset, whitespace-collapsed.
fn caption_plaintext(caption: &roxmltree::Node<'_, '_>) -> String {
    let mut out = String::new();
    append_text(caption, &mut out);
    let collapsed: Vec<&str> = out.split_whitespace().collect();
    collapsed.join(" ")
}

fn append_text(node: &roxmltree::Node<'_, '_>, out: &mut String) {
    for child in node.children() {
        if child.is_text() {
            out.push_str(child.text().unwrap_or(""));
        } else if child.is_element() {
            if child.tag_name().name() == "xref" {
                out.push_str("<ref>");
            } else {
                append_text(&child, out);
            }
        }
    }
}

/// Apply the extraction rules to a parsed document against the package
/// member set. Returns candidates in document order plus per-figure (or
/// per-graphic) rejections.
pub fn extract_jats_figures(
    doc: &roxmltree::Document<'_>,
    archive: &PaperArchive,
) -> (Vec<FigureCandidate>, Vec<JatsRejection>) {
    let nxml_path = archive.nxml_path.clone().unwrap_or_default();
    let mut candidates = Vec::new();
    let mut rejections = Vec::new();

    for (fig_index, fig) in collect_figures(doc).into_iter().enumerate() {
        if let Some(lang) = &fig.lang {
            if !lang.to_ascii_lowercase().starts_with("en") {
                rejections.push(JatsRejection {
                    fig_id: fig.fig_id.clone(),
                    reason: JatsRejectionReason::NonEnglish,
                    detail: Some(lang.clone()),
                });
                continue;
            }
        }
        if fig.graphic_hrefs.is_empty() {
            rejections.push(JatsRejection {
                fig_id: fig.fig_id.clone(),
                reason: JatsRejectionReason::NoGraphic,
                detail: None,
            });
            continue;
        }
        for (graphic_index, href) in fig.graphic_hrefs.iter().enumerate() {
            if !href.to_ascii_lowercase().ends_with(".jpg") {
                rejections.push(JatsRejection {
                    fig_id: fig.fig_id.clone(),
                    reason: JatsRejectionReason::NotJpg,
                    detail: Some(href.clone()),
                });
                continue;
            }
            let Some(member_path) = resolve_href(href, archive) else {
                rejections.push(JatsRejection {
                    fig_id: fig.fig_id.clone(),
                    reason: JatsRejectionReason::MissingFile,
                    detail: Some(href.clone()),
                });
                continue;
            };
            if fig.caption_text.trim().is_empty() {
                rejections.push(JatsRejection {
                    fig_id: fig.fig_id.clone(),
                    reason: JatsRejectionReason::NoCaption,
                    detail: None,
                });
                continue;
            }
            candidates.push(FigureCandidate {
                paper_id: archive.paper_id.clone(),
                tex_path: nxml_path.clone(),
                graphics_path: member_path,
                caption_source: fig.caption_text.clone(),
                caption_span: Span::new(fig_index, graphic_index),
            });
        }
    }
    (candidates, rejections)
}

/// Match an href by full normalized path first, then by unique basename
/// (exact-case, then case-insensitive). PMC packages are flat, but
/// members may carry a directory prefix.
fn resolve_href(href: &str, archive: &PaperArchive) -> Option<String> {
    if let Some(normalized) = crate::ingest::normalize_member_path(href) {
        if archive.member(&normalized).is_some() {
            return Some(normalized);
        }
    }
    let basename = href.rsplit('/').next().unwrap_or(href);
    let exact: Vec<&str> = archive
        .members()
        .filter(|m| m.path.rsplit('/').next() == Some(basename))
        .map(|m| m.path.as_str())
        .collect();
    if exact.len() == 1 {
        return Some(exact[0].to_string());
    }
    let lower = basename.to_ascii_lowercase();
    let ci: Vec<&str> = archive
        .members()
        .filter(|m| {
            m.path
                .rsplit('/')
                .next()
                .map(|b| b.to_ascii_lowercase() == lower)
                .unwrap_or(false)
        })
        .map(|m| m.path.as_str())
        .collect();
    if ci.len() == 1 {
        return Some(ci[0].to_string());
    }
    None
}
