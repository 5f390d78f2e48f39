//! Dockerfile parsing, base-image chains, layer estimates and a
//! reproducibility linter.
//!
//! Parsing is lenient: anything that cannot be understood becomes a
//! [`ParseFinding`] on the returned AST instead of an error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::reference::ImageRef;

mod lint;
pub mod shell;

pub use lint::{lint_reproducibility, LintFinding, Severity};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Keyword {
    From,
    Run,
    Cmd,
    Label,
    Expose,
    Env,
    Add,
    Copy,
    Entrypoint,
    Volume,
    User,
    Workdir,
    Arg,
    Onbuild,
    Stopsignal,
    Healthcheck,
    Shell,
    Maintainer,
    #[serde(untagged)]
    Unknown(String),
}

impl Keyword {
    pub fn parse(word: &str) -> Keyword {
        match word.to_ascii_uppercase().as_str() {
            "FROM" => Keyword::From,
            "RUN" => Keyword::Run,
            "CMD" => Keyword::Cmd,
            "LABEL" => Keyword::Label,
            "EXPOSE" => Keyword::Expose,
            "ENV" => Keyword::Env,
            "ADD" => Keyword::Add,
            "COPY" => Keyword::Copy,
            "ENTRYPOINT" => Keyword::Entrypoint,
            "VOLUME" => Keyword::Volume,
            "USER" => Keyword::User,
            "WORKDIR" => Keyword::Workdir,
            "ARG" => Keyword::Arg,
            "ONBUILD" => Keyword::Onbuild,
            "STOPSIGNAL" => Keyword::Stopsignal,
            "HEALTHCHECK" => Keyword::Healthcheck,
            "SHELL" => Keyword::Shell,
            "MAINTAINER" => Keyword::Maintainer,
            other => Keyword::Unknown(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Keyword::From => "FROM",
            Keyword::Run => "RUN",
            Keyword::Cmd => "CMD",
            Keyword::Label => "LABEL",
            Keyword::Expose => "EXPOSE",
            Keyword::Env => "ENV",
            Keyword::Add => "ADD",
            Keyword::Copy => "COPY",
            Keyword::Entrypoint => "ENTRYPOINT",
            Keyword::Volume => "VOLUME",
            Keyword::User => "USER",
            Keyword::Workdir => "WORKDIR",
            Keyword::Arg => "ARG",
            Keyword::Onbuild => "ONBUILD",
            Keyword::Stopsignal => "STOPSIGNAL",
            Keyword::Healthcheck => "HEALTHCHECK",
            Keyword::Shell => "SHELL",
            Keyword::Maintainer => "MAINTAINER",
            Keyword::Unknown(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandForm {
    Shell(String),
    Exec(Vec<String>),
}

impl CommandForm {
    fn parse(raw: &str) -> CommandForm {
        match json_array(raw) {
            Some(v) => CommandForm::Exec(v),
            None => CommandForm::Shell(raw.to_string()),
        }
    }

    /// The command as a single shell string (exec arguments joined by spaces).
    pub fn text(&self) -> String {
        match self {
            CommandForm::Shell(s) => s.clone(),
            CommandForm::Exec(v) => v.join(" "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form", content = "value")]
pub enum Args {
    From {
        image: String,
        stage_name: Option<String>,
        platform: Option<String>,
    },
    Command(CommandForm),
    KeyValues(Vec<(String, String)>),
    Args(Vec<(String, Option<String>)>),
    Ports(Vec<String>),
    Paths {
        flags: Vec<String>,
        sources: Vec<String>,
        dest: Option<String>,
    },
    List(Vec<String>),
    Raw(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub keyword: Keyword,
    pub raw_args: String,
    pub parsed_args: Args,
    /// First and last physical line, 1-based.
    pub line_span: (usize, usize),
}

impl Instruction {
    pub fn line(&self) -> usize {
        self.line_span.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub from_index: usize,
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    UnparsableLine,
    UnknownInstruction,
    InstructionBeforeFrom,
    InvalidUtf8,
    InvalidDirective,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFinding {
    pub kind: FindingKind,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DockerfileAst {
    pub escape: Escape,
    pub instructions: Vec<Instruction>,
    pub stages: Vec<Stage>,
    pub findings: Vec<ParseFinding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Escape {
    #[default]
    Backslash,
    Backtick,
}

impl Escape {
    pub fn char(self) -> char {
        match self {
            Escape::Backslash => '\\',
            Escape::Backtick => '`',
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Reject input with no instructions.
    pub strict: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DockerfileError {
    #[error("dockerfile contains no instructions")]
    Empty,
    #[error("dockerfile has no FROM instruction")]
    NoFrom,
}

fn json_array(raw: &str) -> Option<Vec<String>> {
    if !raw.trim_start().starts_with('[') {
        return None;
    }
    serde_json::from_str::<Vec<String>>(raw.trim()).ok()
}

fn parse_directive(line: &str) -> Option<(String, String)> {
    let rest = line.trim().strip_prefix('#')?.trim_start();
    let (name, value) = rest.split_once('=')?;
    let name = name.trim();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((name.to_ascii_lowercase(), value.trim().to_string()))
}

/// Strips the escape character from a line end, if it is a continuation.
fn continuation(line: &str, escape: char) -> Option<&str> {
    line.trim_end().strip_suffix(escape)
}

pub fn parse(text: &str) -> DockerfileAst {
    parse_lines(text, Vec::new())
}

/// Parses raw bytes, decoding invalid UTF-8 lossily and flagging it.
pub fn parse_bytes(bytes: &[u8]) -> DockerfileAst {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse(s),
        Err(e) => {
            let text = String::from_utf8_lossy(bytes);
            let line = 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
            let finding = ParseFinding {
                kind: FindingKind::InvalidUtf8,
                line,
                message: "input is not valid UTF-8; decoded lossily".into(),
            };
            parse_lines(&text, vec![finding])
        }
    }
}

pub fn parse_with(text: &str, opts: ParseOptions) -> Result<DockerfileAst, DockerfileError> {
    let ast = parse(text);
    if opts.strict && ast.instructions.is_empty() {
        return Err(DockerfileError::Empty);
    }
    Ok(ast)
}

fn parse_lines(text: &str, mut findings: Vec<ParseFinding>) -> DockerfileAst {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let lines: Vec<&str> = text.lines().collect();
    let mut escape = Escape::Backslash;

    let mut i = 0;
    while i < lines.len() {
        let Some((name, value)) = parse_directive(lines[i]) else {
            break;
        };
        if name == "escape" {
            match value.as_str() {
                "\\" => escape = Escape::Backslash,
                "`" => escape = Escape::Backtick,
                _ => findings.push(ParseFinding {
                    kind: FindingKind::InvalidDirective,
                    line: i + 1,
                    message: format!("invalid escape directive value {value:?}"),
                }),
            }
        }
        i += 1;
    }

    let esc = escape.char();
    let mut instructions = Vec::new();
    while i < lines.len() {
        let first = lines[i].trim_start();
        if first.is_empty() || first.starts_with('#') {
            i += 1;
            continue;
        }
        let start = i;
        let mut logical = String::new();
        let mut open = match continuation(first, esc) {
            Some(body) => {
                logical.push_str(body);
                true
            }
            None => {
                logical.push_str(first);
                false
            }
        };
        i += 1;
        while open && i < lines.len() {
            let line = lines[i];
            let trimmed = line.trim_start();
            i += 1;
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match continuation(line, esc) {
                Some(body) => logical.push_str(body),
                None => {
                    logical.push_str(line);
                    open = false;
                }
            }
        }
        let end = i.max(start + 1);
        build_instruction(&logical, (start + 1, end), esc, &mut instructions, &mut findings);
    }

    let mut stages = Vec::new();
    for (idx, ins) in instructions.iter().enumerate() {
        if ins.keyword == Keyword::From {
            let name = match &ins.parsed_args {
                Args::From { stage_name, .. } => stage_name.clone(),
                _ => None,
            };
            stages.push(Stage { from_index: idx, name });
        } else if stages.is_empty() && ins.keyword != Keyword::Arg {
            findings.push(ParseFinding {
                kind: FindingKind::InstructionBeforeFrom,
                line: ins.line(),
                message: format!("{} before the first FROM", ins.keyword.as_str()),
            });
        }
    }
    findings.sort_by_key(|f| f.line);

    DockerfileAst {
        escape,
        instructions,
        stages,
        findings,
    }
}

fn build_instruction(
    logical: &str,
    span: (usize, usize),
    esc: char,
    out: &mut Vec<Instruction>,
    findings: &mut Vec<ParseFinding>,
) {
    let logical = logical.trim();
    let (word, rest) = match logical.find(char::is_whitespace) {
        Some(p) => (&logical[..p], logical[p..].trim()),
        None => (logical, ""),
    };
    let well_formed = word.starts_with(|c: char| c.is_ascii_alphabetic())
        && word.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !well_formed {
        findings.push(ParseFinding {
            kind: FindingKind::UnparsableLine,
            line: span.0,
            message: format!("cannot parse instruction {:?}", truncate(logical, 40)),
        });
        return;
    }
    let keyword = Keyword::parse(word);
    if let Keyword::Unknown(k) = &keyword {
        findings.push(ParseFinding {
            kind: FindingKind::UnknownInstruction,
            line: span.0,
            message: format!("unknown instruction {k} kept as raw"),
        });
    }
    let parsed_args = parse_args(&keyword, rest, esc);
    out.push(Instruction {
        keyword,
        raw_args: rest.to_string(),
        parsed_args,
        line_span: span,
    });
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn parse_args(keyword: &Keyword, raw: &str, esc: char) -> Args {
    match keyword {
        Keyword::From => parse_from(raw),
        Keyword::Run | Keyword::Cmd | Keyword::Entrypoint | Keyword::Shell => Args::Command(CommandForm::parse(raw)),
        Keyword::Env | Keyword::Label => Args::KeyValues(parse_key_values(raw, esc)),
        Keyword::Arg => Args::Args(
            shell::split_words(raw, esc)
                .into_iter()
                .map(|w| match w.split_once('=') {
                    Some((k, v)) => (k.to_string(), Some(v.to_string())),
                    None => (w, None),
                })
                .collect(),
        ),
        Keyword::Expose => Args::Ports(raw.split_whitespace().map(String::from).collect()),
        Keyword::Add | Keyword::Copy => parse_paths(raw, esc),
        Keyword::Volume => {
            Args::List(json_array(raw).unwrap_or_else(|| raw.split_whitespace().map(String::from).collect()))
        }
        _ => Args::Raw(raw.to_string()),
    }
}

fn parse_from(raw: &str) -> Args {
    let mut platform = None;
    let mut words = Vec::new();
    for w in raw.split_whitespace() {
        if let Some(p) = w.strip_prefix("--platform=") {
            platform = Some(p.to_string());
        } else if !w.starts_with("--") {
            words.push(w);
        }
    }
    let image = words.first().map(|s| s.to_string()).unwrap_or_default();
    let stage_name = match words.as_slice() {
        [_, as_kw, name, ..] if as_kw.eq_ignore_ascii_case("as") => Some(name.to_string()),
        _ => None,
    };
    Args::From {
        image,
        stage_name,
        platform,
    }
}

fn parse_key_values(raw: &str, esc: char) -> Vec<(String, String)> {
    let first = raw.split_whitespace().next().unwrap_or("");
    if !first.contains('=') {
        // legacy `ENV key value with spaces`
        return match raw.split_once(char::is_whitespace) {
            Some((k, v)) => vec![(k.to_string(), v.trim().to_string())],
            None if !raw.is_empty() => vec![(raw.to_string(), String::new())],
            None => vec![],
        };
    }
    shell::split_words(raw, esc)
        .into_iter()
        .map(|w| match w.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (w, String::new()),
        })
        .collect()
}

fn parse_paths(raw: &str, esc: char) -> Args {
    let mut flags = Vec::new();
    let mut rest = raw;
    loop {
        let r = rest.trim_start();
        if !r.starts_with("--") {
            rest = r;
            break;
        }
        let end = r.find(char::is_whitespace).unwrap_or(r.len());
        flags.push(r[..end].to_string());
        rest = &r[end..];
    }
    let mut items = json_array(rest).unwrap_or_else(|| shell::split_words(rest, esc));
    let dest = items.pop();
    Args::Paths {
        flags,
        sources: items,
        dest,
    }
}

/// Renders the AST back to Dockerfile text, one instruction per line.
pub fn render(ast: &DockerfileAst) -> String {
    let mut out = String::new();
    if ast.escape == Escape::Backtick {
        out.push_str("# escape=`\n");
    }
    for ins in &ast.instructions {
        if ins.raw_args.is_empty() {
            let _ = writeln!(out, "{}", ins.keyword.as_str());
        } else {
            let _ = writeln!(out, "{} {}", ins.keyword.as_str(), ins.raw_args);
        }
    }
    out
}

/// Base of one build stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum StageBase {
    External(ImageRef),
    /// Built on an earlier stage of the same file.
    Stage(usize),
    Scratch,
    /// Not a valid reference, usually because it uses a build argument.
    Unresolved(String),
}

/// One entry per stage, in order.
pub fn base_chain(ast: &DockerfileAst) -> Result<Vec<StageBase>, DockerfileError> {
    if ast.stages.is_empty() {
        return Err(DockerfileError::NoFrom);
    }
    let mut out = Vec::with_capacity(ast.stages.len());
    for (si, stage) in ast.stages.iter().enumerate() {
        let image = match &ast.instructions[stage.from_index].parsed_args {
            Args::From { image, .. } => image.as_str(),
            _ => "",
        };
        let earlier = ast.stages[..si]
            .iter()
            .position(|s| s.name.as_deref().is_some_and(|n| n.eq_ignore_ascii_case(image)));
        let base = if let Some(idx) = earlier {
            StageBase::Stage(idx)
        } else if image.eq_ignore_ascii_case("scratch") {
            StageBase::Scratch
        } else {
            match image.parse::<ImageRef>() {
                Ok(r) if !image.contains('$') => StageBase::External(r),
                _ => StageBase::Unresolved(image.to_string()),
            }
        };
        out.push(base);
    }
    Ok(out)
}

/// External base images of all stages, in stage order.
pub fn external_bases(ast: &DockerfileAst) -> Result<Vec<ImageRef>, DockerfileError> {
    Ok(base_chain(ast)?
        .into_iter()
        .filter_map(|b| match b {
            StageBase::External(r) => Some(r),
            _ => None,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerEstimate {
    pub fs_layer_count: usize,
    pub total_instruction_count: usize,
}

/// Only RUN, ADD and COPY produce filesystem layers.
pub fn estimate_layers(ast: &DockerfileAst) -> LayerEstimate {
    LayerEstimate {
        fs_layer_count: ast
            .instructions
            .iter()
            .filter(|i| matches!(i.keyword, Keyword::Run | Keyword::Add | Keyword::Copy))
            .count(),
        total_instruction_count: ast.instructions.len(),
    }
}
