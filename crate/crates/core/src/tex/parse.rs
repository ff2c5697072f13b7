//! Total tokenizer/parser for the command/environment/group/comment/verbatim
//! subset of TeX. It never fails: unbalanced input produces a best-effort
//! tree with a `degraded` flag so candidate extraction can still run.

/// Byte span into the decoded source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }
}

/// A `{...}` argument: inner text with comments elided, plus the span of
/// the inner content in the decoded source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TexArg {
    pub text: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TexCommand {
    pub name: String,
    pub optional_args: Vec<String>,
    pub required_args: Vec<TexArg>,
    pub span: Span,
}

impl TexCommand {
    pub fn first_required_arg(&self) -> Option<&TexArg> {
        self.required_args.first()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TexEnvironment {
    pub name: String,
    pub children: Vec<TexNode>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TexNode {
    Command(TexCommand),
    Environment(TexEnvironment),
    Group { children: Vec<TexNode>, span: Span },
    Text { content: String, span: Span },
    Comment { span: Span },
    Math { content: String, span: Span },
    Verbatim { content: String, span: Span },
}

impl TexNode {
    pub fn span(&self) -> Span {
        match self {
            TexNode::Command(c) => c.span,
            TexNode::Environment(e) => e.span,
            TexNode::Group { span, .. }
            | TexNode::Text { span, .. }
            | TexNode::Comment { span }
            | TexNode::Math { span, .. }
            | TexNode::Verbatim { span, .. } => *span,
        }
    }
}

/// Parse result: top-level nodes plus a flag set whenever recovery was
/// applied (stray braces, mismatched or unclosed environments, unterminated
/// math or verbatim).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTex {
    pub root: Vec<TexNode>,
    pub degraded: bool,
}

/// Environments whose bodies are captured opaquely.
const VERBATIM_ENVS: [&str; 7] = [
    "verbatim",
    "verbatim*",
    "Verbatim",
    "lstlisting",
    "minted",
    "alltt",
    "comment",
];

/// Decode raw `.tex` bytes as ISO-8859-1. Total: every byte value maps to
/// the Unicode scalar with the same value, so the output scalar count
/// equals the input byte count.
pub fn decode_tex(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

/// Parse decoded TeX source into a node tree. Total; see [`ParsedTex`].
pub fn parse_tex(source: &str) -> ParsedTex {
    let mut parser = Parser {
        src: source,
        bytes: source.as_bytes(),
        pos: 0,
        degraded: false,
        open_envs: Vec::new(),
        pending_end: None,
    };
    let root = parser.parse_nodes(Terminator::EndOfInput);
    // A pending \end that never matched an open environment.
    if parser.pending_end.is_some() {
        parser.degraded = true;
    }
    ParsedTex {
        root,
        degraded: parser.degraded,
    }
}

#[derive(PartialEq)]
enum Terminator {
    EndOfInput,
    GroupClose,
    EnvEnd,
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    degraded: bool,
    open_envs: Vec<String>,
    /// An `\end{name}` that closed an outer environment; propagates up
    /// until the matching level consumes it.
    pending_end: Option<String>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn parse_nodes(&mut self, terminator: Terminator) -> Vec<TexNode> {
        let mut nodes = Vec::new();
        while !self.at_end() {
            if self.pending_end.is_some() {
                break;
            }
            let b = self.peek().unwrap();
            match b {
                b'}' => {
                    if terminator == Terminator::GroupClose {
                        return nodes;
                    }
                    // Stray closing brace: skip it.
                    self.degraded = true;
                    self.pos += 1;
                }
                b'{' => {
                    let start = self.pos;
                    self.pos += 1;
                    let children = self.parse_nodes(Terminator::GroupClose);
                    if self.peek() == Some(b'}') {
                        self.pos += 1;
                    } else if self.pending_end.is_none() {
                        self.degraded = true;
                    }
                    nodes.push(TexNode::Group {
                        children,
                        span: Span::new(start, self.pos),
                    });
                }
                b'%' => nodes.push(self.parse_comment()),
                b'$' => nodes.push(self.parse_dollar_math()),
                b'\\' => {
                    if let Some(node) = self.parse_command(&mut nodes, &terminator) {
                        nodes.push(node);
                    }
                    // `None` either means a consumed \end or a pending one;
                    // the loop check above handles the pending case.
                    if self.pending_end.is_some() && terminator == Terminator::EnvEnd {
                        break;
                    }
                }
                _ => nodes.push(self.parse_text()),
            }
        }
        if terminator != Terminator::EndOfInput && self.at_end() && self.pending_end.is_none() {
            self.degraded = true;
        }
        nodes
    }

    fn parse_comment(&mut self) -> TexNode {
        let start = self.pos;
        while let Some(b) = self.peek() {
            self.pos += 1;
            if b == b'\n' {
                break;
            }
        }
        TexNode::Comment {
            span: Span::new(start, self.pos),
        }
    }

    fn parse_text(&mut self) -> TexNode {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if matches!(b, b'\\' | b'{' | b'}' | b'%' | b'$') {
                break;
            }
            self.pos += 1;
        }
        // Positions only ever stop on ASCII delimiters, so slicing is
        // always on a char boundary.
        TexNode::Text {
            content: self.src[start..self.pos].to_string(),
            span: Span::new(start, self.pos),
        }
    }

    fn parse_dollar_math(&mut self) -> TexNode {
        let start = self.pos;
        let display = self.bytes.get(self.pos + 1) == Some(&b'$');
        let opener_len = if display { 2 } else { 1 };
        self.pos += opener_len;
        let content_start = self.pos;
        let mut content_end = None;
        while !self.at_end() {
            match self.peek().unwrap() {
                b'\\' => self.skip_escaped(),
                b'$' => {
                    if display {
                        if self.bytes.get(self.pos + 1) == Some(&b'$') {
                            content_end = Some(self.pos);
                            self.pos += 2;
                            break;
                        }
                        self.pos += 1;
                    } else {
                        content_end = Some(self.pos);
                        self.pos += 1;
                        break;
                    }
                }
                _ => self.pos += 1,
            }
        }
        let content_end = content_end.unwrap_or_else(|| {
            self.degraded = true;
            self.pos
        });
        TexNode::Math {
            content: self.src[content_start..content_end].to_string(),
            span: Span::new(start, self.pos),
        }
    }

    /// Skip a backslash plus the char after it (escape pair).
    fn skip_escaped(&mut self) {
        self.pos += 1;
        if let Some(b) = self.peek() {
            self.pos += char_len(b);
        }
    }

    /// Parse a command starting at `\`. Returns `None` when the command
    /// was an `\end{...}` (consumed or propagated) or a math-bracket
    /// construct already pushed by the caller path.
    fn parse_command(
        &mut self,
        _siblings: &mut Vec<TexNode>,
        _terminator: &Terminator,
    ) -> Option<TexNode> {
        let start = self.pos;
        self.pos += 1; // consume backslash
        let Some(first) = self.peek() else {
            // Lone trailing backslash.
            self.degraded = true;
            return Some(TexNode::Command(TexCommand {
                name: String::new(),
                optional_args: Vec::new(),
                required_args: Vec::new(),
                span: Span::new(start, self.pos),
            }));
        };

        if !first.is_ascii_alphabetic() {
            // Control symbol: \%, \{, \\, \[ etc.
            self.pos += char_len(first);
            if first == b'[' {
                return Some(self.parse_bracket_math(start, "\\]"));
            }
            if first == b'(' {
                return Some(self.parse_bracket_math(start, "\\)"));
            }
            let name = self.src[start + 1..self.pos].to_string();
            return Some(TexNode::Command(TexCommand {
                name,
                optional_args: Vec::new(),
                required_args: Vec::new(),
                span: Span::new(start, self.pos),
            }));
        }

        let name_start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_alphabetic()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'*') {
            self.pos += 1;
        }
        let name = self.src[name_start..self.pos].to_string();

        if name == "begin" {
            return self.parse_environment(start);
        }
        if name == "end" {
            self.handle_end(start);
            return None;
        }

        let (optional_args, required_args) = self.parse_args();
        Some(TexNode::Command(TexCommand {
            name,
            optional_args,
            required_args,
            span: Span::new(start, self.pos),
        }))
    }

    fn parse_bracket_math(&mut self, start: usize, closer: &str) -> TexNode {
        let content_start = self.pos;
        match self.src[self.pos..].find(closer) {
            Some(rel) => {
                let content_end = self.pos + rel;
                self.pos = content_end + closer.len();
                TexNode::Math {
                    content: self.src[content_start..content_end].to_string(),
                    span: Span::new(start, self.pos),
                }
            }
            None => {
                self.degraded = true;
                let content = self.src[content_start..].to_string();
                self.pos = self.bytes.len();
                TexNode::Math {
                    content,
                    span: Span::new(start, self.pos),
                }
            }
        }
    }

    fn parse_environment(&mut self, start: usize) -> Option<TexNode> {
        self.skip_ws();
        let env_name = match self.scan_braced() {
            Some(arg) => arg.text.trim().to_string(),
            None => {
                // \begin without a name: treat as plain command.
                self.degraded = true;
                return Some(TexNode::Command(TexCommand {
                    name: "begin".into(),
                    optional_args: Vec::new(),
                    required_args: Vec::new(),
                    span: Span::new(start, self.pos),
                }));
            }
        };

        if VERBATIM_ENVS.contains(&env_name.as_str()) {
            return Some(self.parse_verbatim(start, &env_name));
        }

        self.open_envs.push(env_name.clone());
        let children = self.parse_nodes(Terminator::EnvEnd);
        self.open_envs.pop();

        match self.pending_end.take() {
            Some(end_name) if end_name == env_name => {}
            Some(end_name) => {
                // \end for an outer environment: close this level and keep
                // propagating.
                self.degraded = true;
                self.pending_end = Some(end_name);
            }
            None => {
                // EOF without \end.
                self.degraded = true;
            }
        }
        Some(TexNode::Environment(TexEnvironment {
            name: env_name,
            children,
            span: Span::new(start, self.pos),
        }))
    }

    fn parse_verbatim(&mut self, start: usize, env_name: &str) -> TexNode {
        let closer = format!("\\end{{{env_name}}}");
        let content_start = self.pos;
        match self.src[self.pos..].find(&closer) {
            Some(rel) => {
                let content_end = self.pos + rel;
                self.pos = content_end + closer.len();
                TexNode::Verbatim {
                    content: self.src[content_start..content_end].to_string(),
                    span: Span::new(start, self.pos),
                }
            }
            None => {
                self.degraded = true;
                let content = self.src[content_start..].to_string();
                self.pos = self.bytes.len();
                TexNode::Verbatim {
                    content,
                    span: Span::new(start, self.pos),
                }
            }
        }
    }

    fn handle_end(&mut self, _start: usize) {
        self.skip_ws();
        let name = match self.scan_braced() {
            Some(arg) => arg.text.trim().to_string(),
            None => {
                self.degraded = true;
                return;
            }
        };
        if self.open_envs.iter().any(|n| *n == name) {
            self.pending_end = Some(name);
        } else {
            // \end with no matching open environment: drop it.
            self.degraded = true;
        }
    }

    /// Greedily attach consecutive `[...]` and `{...}` argument groups.
    fn parse_args(&mut self) -> (Vec<String>, Vec<TexArg>) {
        let mut optional = Vec::new();
        let mut required = Vec::new();
        loop {
            let before = self.pos;
            self.skip_ws();
            match self.peek() {
                Some(b'[') => match self.scan_bracketed() {
                    Some(text) => optional.push(text),
                    None => {
                        self.pos = before;
                        break;
                    }
                },
                Some(b'{') => match self.scan_braced() {
                    Some(arg) => required.push(arg),
                    None => {
                        self.pos = before;
                        break;
                    }
                },
                _ => {
                    self.pos = before;
                    break;
                }
            }
        }
        (optional, required)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    /// Scan a balanced `{...}` group. Comments inside are elided from the
    /// captured text; escape pairs (`\{`, `\}`, `\%`) do not affect
    /// balance. Returns `None` if not at `{`. Unclosed groups capture to
    /// EOF and set the degraded flag.
    fn scan_braced(&mut self) -> Option<TexArg> {
        if self.peek() != Some(b'{') {
            return None;
        }
        self.pos += 1;
        let content_start = self.pos;
        let mut text = String::new();
        let mut depth = 1usize;
        let mut seg_start = self.pos;
        while !self.at_end() {
            let b = self.peek().unwrap();
            match b {
                b'\\' => self.skip_escaped(),
                b'%' => {
                    text.push_str(&self.src[seg_start..self.pos]);
                    while let Some(c) = self.peek() {
                        self.pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                    seg_start = self.pos;
                }
                b'{' => {
                    depth += 1;
                    self.pos += 1;
                }
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        text.push_str(&self.src[seg_start..self.pos]);
                        let span = Span::new(content_start, self.pos);
                        self.pos += 1;
                        return Some(TexArg { text, span });
                    }
                    self.pos += 1;
                }
                _ => self.pos += char_len(b),
            }
        }
        self.degraded = true;
        text.push_str(&self.src[seg_start..self.pos]);
        Some(TexArg {
            text,
            span: Span::new(content_start, self.pos),
        })
    }

    /// Scan a `[...]` optional argument; `]` closes only at brace depth 0.
    fn scan_bracketed(&mut self) -> Option<String> {
        if self.peek() != Some(b'[') {
            return None;
        }
        self.pos += 1;
        let mut text = String::new();
        let mut depth = 0usize;
        let mut seg_start = self.pos;
        while !self.at_end() {
            let b = self.peek().unwrap();
            match b {
                b'\\' => self.skip_escaped(),
                b'%' => {
                    text.push_str(&self.src[seg_start..self.pos]);
                    while let Some(c) = self.peek() {
                        self.pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                    seg_start = self.pos;
                }
                b'{' => {
                    depth += 1;
                    self.pos += 1;
                }
                b'}' => {
                    depth = depth.saturating_sub(1);
                    self.pos += 1;
                }
                b']' if depth == 0 => {
                    text.push_str(&self.src[seg_start..self.pos]);
                    self.pos += 1;
                    return Some(text);
                }
                _ => self.pos += char_len(b),
            }
        }
        self.degraded = true;
        text.push_str(&self.src[seg_start..self.pos]);
        Some(text)
    }
}

/// UTF-8 length of the char starting with this byte.
fn char_len(b: u8) -> usize {
    if b < 0x80 {
        1
    } else if b < 0xE0 {
        2
    } else if b < 0xF0 {
        3
    } else {
        4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn commands(nodes: &[TexNode]) -> Vec<&TexCommand> {
        let mut out = Vec::new();
        for n in nodes {
            match n {
                TexNode::Command(c) => out.push(c),
                TexNode::Environment(e) => out.extend(commands(&e.children)),
                TexNode::Group { children, .. } => out.extend(commands(children)),
                _ => {}
            }
        }
        out
    }

    #[test]
    fn decode_is_latin1() {
        assert_eq!(decode_tex(&[0x61, 0x62]), "ab");
        assert_eq!(decode_tex(&[0xE9]), "é");
    }

    #[test]
    fn decode_is_total_on_all_bytes() {
        let all: Vec<u8> = (0..=255).collect();
        let decoded = decode_tex(&all);
        assert_eq!(decoded.chars().count(), 256);
    }

    #[test]
    fn parses_minimal_figure() {
        let parsed =
            parse_tex("\\begin{figure}\\includegraphics{a.png}\\caption{X}\\end{figure}");
        assert!(!parsed.degraded);
        assert_eq!(parsed.root.len(), 1);
        let TexNode::Environment(env) = &parsed.root[0] else {
            panic!("expected environment");
        };
        assert_eq!(env.name, "figure");
        let cmds = commands(&env.children);
        assert_eq!(cmds.len(), 2);
        assert_eq!(cmds[0].name, "includegraphics");
        assert_eq!(cmds[0].required_args[0].text, "a.png");
        assert_eq!(cmds[1].name, "caption");
        assert_eq!(cmds[1].required_args[0].text, "X");
    }

    #[test]
    fn comments_are_excluded() {
        let parsed = parse_tex("% \\includegraphics{a.png}\ntext");
        assert!(!parsed.degraded);
        let cmds = commands(&parsed.root);
        assert!(cmds.is_empty());
        assert!(matches!(parsed.root[0], TexNode::Comment { .. }));
    }

    #[test]
    fn escaped_percent_is_not_a_comment() {
        let parsed = parse_tex("50\\% \\includegraphics{a.png}");
        let cmds = commands(&parsed.root);
        assert_eq!(cmds.len(), 2);
        assert_eq!(cmds[0].name, "%");
        assert_eq!(cmds[1].name, "includegraphics");
    }

    #[test]
    fn unbalanced_input_sets_degraded() {
        let parsed = parse_tex("\\begin{figure}\\caption{X}");
        assert!(parsed.degraded);
        assert_eq!(parsed.root.len(), 1);
        let TexNode::Environment(env) = &parsed.root[0] else {
            panic!("expected environment");
        };
        assert_eq!(env.name, "figure");
        assert_eq!(commands(&env.children).len(), 1);
    }

    #[test]
    fn mismatched_end_closes_outer() {
        let parsed = parse_tex("\\begin{a}\\begin{b}x\\end{a}rest");
        assert!(parsed.degraded);
        let TexNode::Environment(outer) = &parsed.root[0] else {
            panic!("expected environment");
        };
        assert_eq!(outer.name, "a");
    }

    #[test]
    fn stray_end_is_dropped() {
        let parsed = parse_tex("x\\end{figure}y");
        assert!(parsed.degraded);
        let texts: Vec<_> = parsed
            .root
            .iter()
            .filter_map(|n| match n {
                TexNode::Text { content, .. } => Some(content.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(texts, vec!["x", "y"]);
    }

    #[test]
    fn nested_environments_balance() {
        let parsed = parse_tex(
            "\\begin{figure}\\begin{subfigure}\\includegraphics{a.png}\\end{subfigure}\\end{figure}",
        );
        assert!(!parsed.degraded);
        let TexNode::Environment(fig) = &parsed.root[0] else {
            panic!()
        };
        let sub = fig
            .children
            .iter()
            .find_map(|n| match n {
                TexNode::Environment(e) => Some(e),
                _ => None,
            })
            .unwrap();
        assert_eq!(sub.name, "subfigure");
    }

    #[test]
    fn verbatim_is_opaque() {
        let parsed = parse_tex("\\begin{verbatim}\\includegraphics{a.png}\\end{verbatim}");
        assert!(!parsed.degraded);
        assert!(commands(&parsed.root).is_empty());
        assert!(matches!(parsed.root[0], TexNode::Verbatim { .. }));
    }

    #[test]
    fn lstlisting_is_opaque() {
        let parsed = parse_tex("\\begin{lstlisting}\\caption{no}\\end{lstlisting}ok");
        assert!(commands(&parsed.root).is_empty());
    }

    #[test]
    fn math_is_opaque() {
        let parsed = parse_tex("$\\includegraphics{a.png}$ and \\(\\caption{x}\\)");
        assert!(commands(&parsed.root).is_empty());
        assert!(matches!(parsed.root[0], TexNode::Math { .. }));
    }

    #[test]
    fn optional_args_are_captured() {
        let parsed = parse_tex("\\includegraphics[width=0.5\\textwidth]{fig/a.pdf}");
        let cmds = commands(&parsed.root);
        assert_eq!(cmds[0].optional_args, vec!["width=0.5\\textwidth"]);
        assert_eq!(cmds[0].required_args[0].text, "fig/a.pdf");
    }

    #[test]
    fn nested_braces_in_args() {
        let parsed = parse_tex("\\caption{See {\\bf bold} text}");
        let cmds = commands(&parsed.root);
        assert_eq!(cmds[0].required_args[0].text, "See {\\bf bold} text");
    }

    #[test]
    fn comment_inside_arg_is_elided() {
        let parsed = parse_tex("\\caption{Line one % hidden }brace\nline two}");
        let cmds = commands(&parsed.root);
        assert_eq!(cmds[0].required_args[0].text, "Line one line two");
    }

    #[test]
    fn arg_spans_point_into_source() {
        let src = "\\caption{hello}";
        let parsed = parse_tex(src);
        let cmds = commands(&parsed.root);
        let arg = &cmds[0].required_args[0];
        assert_eq!(&src[arg.span.start..arg.span.end], "hello");
    }

    #[test]
    fn sibling_spans_do_not_overlap() {
        let src = "a \\cmd{x} b $m$ {g} % c\nd";
        let parsed = parse_tex(src);
        let mut last_end = 0;
        for node in &parsed.root {
            let span = node.span();
            assert!(span.start >= last_end, "overlap at {span:?}");
            assert!(span.end <= src.len());
            last_end = span.end;
        }
    }

    #[test]
    fn star_commands_keep_star_in_name() {
        let parsed = parse_tex("\\section*{Intro}");
        let cmds = commands(&parsed.root);
        assert_eq!(cmds[0].name, "section*");
    }

    #[test]
    fn parser_is_total_on_noise() {
        // Every prefix of this pathological input must parse without panic.
        let noise = "\\begin{a}{}}{$$\\end{b}%\n\\x{\\begin{verbatim}zz\\caption{";
        for i in 0..=noise.len() {
            if noise.is_char_boundary(i) {
                let _ = parse_tex(&noise[..i]);
            }
        }
    }
}
