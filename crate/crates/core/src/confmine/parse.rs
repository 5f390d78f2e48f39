use serde::Serialize;

use super::{classify_value, unquote, ConfigFile, ConfigFormat, ParamObservation, Source, ValueClass};
use crate::dockerfile::{Args, DockerfileAst, Keyword};
use crate::reference::ImageRef;

pub const DOCKERFILE_SOFTWARE: &str = "dockerfile";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigParse {
    pub format: ConfigFormat,
    pub observations: Vec<ParamObservation>,
    /// Content kept for manual review when the format is unknown.
    pub raw: Option<String>,
    /// The content was not valid text and was skipped.
    pub undecodable: bool,
}

fn guess_format(path: &str, text: &str) -> ConfigFormat {
    let name = path.rsplit('/').next().unwrap_or(path);
    if name.ends_with(".cnf") || name.ends_with(".ini") {
        return ConfigFormat::Ini;
    }
    if path.contains("apache") || path.contains("httpd") {
        return ConfigFormat::Directive;
    }
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with(';'));
    match first {
        Some(l) if l.starts_with('[') && l.ends_with(']') => ConfigFormat::Ini,
        _ if name.ends_with(".conf") || name.ends_with(".conf.sample") => ConfigFormat::KeyValue,
        _ => ConfigFormat::Unknown,
    }
}

/// Cuts a trailing comment introduced by whitespace and `#` or `;` outside
/// quotes.
fn strip_inline_comment(line: &str) -> &str {
    let mut quote = None;
    let mut prev_space = false;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if (c == '#' || c == ';') && prev_space => return line[..i].trim_end(),
            None => {}
        }
        prev_space = c.is_whitespace();
    }
    line
}

struct Emitter<'a> {
    file: &'a ConfigFile,
    image: &'a ImageRef,
    out: Vec<ParamObservation>,
}

impl Emitter<'_> {
    fn emit(&mut self, parameter: String, raw: &str, line: usize, class: Option<ValueClass>) {
        if parameter.is_empty() {
            return;
        }
        let raw = raw.trim();
        let value = unquote(raw).to_string();
        let value_class = class.unwrap_or_else(|| classify_value(&parameter, &value));
        self.out.push(ParamObservation {
            software_id: self.file.software_id.clone(),
            parameter,
            value,
            raw_value: raw.to_string(),
            value_class,
            image: self.image.clone(),
            source: Source::Config {
                path: self.file.path.clone(),
            },
            file_line: Some(line),
        });
    }
}

/// Physical lines joined on trailing backslash, with the 1-based number of
/// the first line of each logical line.
fn logical_lines(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, String)> = None;
    for (i, line) in text.lines().enumerate() {
        let (n, mut acc, line) = match cur.take() {
            Some((n, acc)) => (n, acc, line.trim_start()),
            None => (i + 1, String::new(), line),
        };
        match line.trim_end().strip_suffix('\\') {
            Some(body) => {
                acc.push_str(body.trim_end());
                acc.push(' ');
                cur = Some((n, acc));
            }
            None => {
                acc.push_str(line);
                out.push((n, acc));
            }
        }
    }
    out.extend(cur);
    out
}

fn is_include(name: &str) -> bool {
    matches!(
        name.to_ascii_lowercase().as_str(),
        "include" | "includeoptional" | "!include" | "!includedir"
    )
}

fn parse_ini(text: &str, e: &mut Emitter) {
    let mut section = String::new();
    for (n, line) in logical_lines(text) {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
            continue;
        }
        let l = strip_inline_comment(l);
        if l.starts_with('[') && l.ends_with(']') {
            section = l[1..l.len() - 1].trim().to_string();
            continue;
        }
        if let Some((word, rest)) = l.split_once(char::is_whitespace).filter(|(w, _)| is_include(w)) {
            e.emit(word.to_string(), rest, n, Some(ValueClass::Path));
            continue;
        }
        let (key, value) = match l.split_once('=') {
            Some((k, v)) => (k.trim(), v),
            None => (l, ""),
        };
        if key.is_empty() {
            continue;
        }
        let parameter = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        e.emit(parameter, value, n, None);
    }
}

fn parse_key_value(text: &str, e: &mut Emitter) {
    for (n, line) in logical_lines(text) {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
            continue;
        }
        let l = strip_inline_comment(l);
        let eq = l.split_once('=').filter(|(k, _)| {
            let k = k.trim();
            !k.is_empty() && !k.contains(char::is_whitespace)
        });
        let (key, value) = match eq {
            Some((k, v)) => (k.trim(), v),
            None => l.split_once(char::is_whitespace).unwrap_or((l, "")),
        };
        let class = is_include(key).then_some(ValueClass::Path);
        e.emit(key.to_string(), value, n, class);
    }
}

fn parse_directive(text: &str, e: &mut Emitter) {
    let mut sections: Vec<String> = Vec::new();
    for (n, line) in logical_lines(text) {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(close) = l.strip_prefix("</") {
            let name = close.trim_end_matches('>').trim();
            if let Some(pos) = sections.iter().rposition(|s| s.eq_ignore_ascii_case(name)) {
                sections.truncate(pos);
            }
            continue;
        }
        if let Some(open) = l.strip_prefix('<') {
            let open = open.trim_end_matches('>');
            let name = open.split_whitespace().next().unwrap_or("");
            sections.push(name.to_string());
            continue;
        }
        let (name, value) = l.split_once(char::is_whitespace).unwrap_or((l, ""));
        let mut parameter = sections.join(".");
        if !parameter.is_empty() {
            parameter.push('.');
        }
        parameter.push_str(name);
        let class = is_include(name).then_some(ValueClass::Path);
        e.emit(parameter, value, n, class);
    }
}

/// Parses one configuration file into parameter observations. Duplicate
/// keys are all recorded.
pub fn parse_config(file: &ConfigFile, content: &[u8], image: &ImageRef) -> ConfigParse {
    let Ok(text) = std::str::from_utf8(content) else {
        return ConfigParse {
            format: file.format,
            observations: Vec::new(),
            raw: None,
            undecodable: true,
        };
    };
    let format = match file.format {
        ConfigFormat::Unknown => guess_format(&file.path, text),
        f => f,
    };
    let mut e = Emitter {
        file,
        image,
        out: Vec::new(),
    };
    match format {
        ConfigFormat::Ini => parse_ini(text, &mut e),
        ConfigFormat::KeyValue => parse_key_value(text, &mut e),
        ConfigFormat::Directive => parse_directive(text, &mut e),
        ConfigFormat::Unknown => {
            return ConfigParse {
                format,
                observations: Vec::new(),
                raw: Some(text.to_string()),
                undecodable: false,
            }
        }
    }
    ConfigParse {
        format,
        observations: e.out,
        raw: None,
        undecodable: false,
    }
}

/// One observation per ENV pair and per EXPOSE port.
pub fn harvest_env(ast: &DockerfileAst, image: &ImageRef) -> Vec<ParamObservation> {
    let mut out = Vec::new();
    for ins in &ast.instructions {
        match (&ins.keyword, &ins.parsed_args) {
            (Keyword::Env, Args::KeyValues(pairs)) => {
                for (k, v) in pairs.iter().filter(|(k, _)| !k.is_empty()) {
                    out.push(ParamObservation {
                        software_id: DOCKERFILE_SOFTWARE.into(),
                        parameter: k.clone(),
                        value: v.clone(),
                        raw_value: v.clone(),
                        value_class: classify_value(k, v),
                        image: image.clone(),
                        source: Source::Env,
                        file_line: Some(ins.line()),
                    });
                }
            }
            (Keyword::Expose, Args::Ports(ports)) => {
                for p in ports {
                    out.push(ParamObservation {
                        software_id: DOCKERFILE_SOFTWARE.into(),
                        parameter: "EXPOSE".into(),
                        value: p.clone(),
                        raw_value: p.clone(),
                        value_class: ValueClass::IpPort,
                        image: image.clone(),
                        source: Source::Expose,
                        file_line: Some(ins.line()),
                    });
                }
            }
            _ => {}
        }
    }
    out
}
