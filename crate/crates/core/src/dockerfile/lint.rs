use serde::{Deserialize, Serialize};

use super::shell;
use super::{Args, DockerfileAst, Instruction, Keyword, StageBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LintFinding {
    pub rule_id: String,
    pub severity: Severity,
    pub line: usize,
    pub message: String,
}

const VERIFIERS: &[&str] = &["sha256sum", "sha512sum", "sha1sum", "md5sum", "shasum"];

/// R1 unpinned base image, R2 unpinned package install, R3 unverified remote
/// download. Findings are ordered by line.
pub fn lint_reproducibility(ast: &DockerfileAst) -> Vec<LintFinding> {
    let mut out = Vec::new();
    let chain = super::base_chain(ast).unwrap_or_default();
    for (si, stage) in ast.stages.iter().enumerate() {
        if let Some(StageBase::External(r)) = chain.get(si) {
            let image = match &ast.instructions[stage.from_index].parsed_args {
                Args::From { image, .. } => image.as_str(),
                _ => "",
            };
            if r.digest.is_none() && r.tag == "latest" {
                out.push(LintFinding {
                    rule_id: "R1".into(),
                    severity: Severity::Warning,
                    line: ast.instructions[stage.from_index].line(),
                    message: format!("base image {image} is not pinned to a version tag"),
                });
            }
        }
    }
    for ins in &ast.instructions {
        match ins.keyword {
            Keyword::Run => lint_run(ins, &mut out),
            Keyword::Add => lint_add(ins, &mut out),
            _ => {}
        }
    }
    out.sort();
    out.sort_by_key(|f| f.line);
    out
}

fn lint_run(ins: &Instruction, out: &mut Vec<LintFinding>) {
    let text = match &ins.parsed_args {
        Args::Command(c) => c.text(),
        _ => return,
    };
    let commands = shell::commands(&text);
    for cmd in &commands {
        for pkg in unpinned_packages(cmd) {
            out.push(LintFinding {
                rule_id: "R2".into(),
                severity: Severity::Warning,
                line: ins.line(),
                message: format!("package {} installed with {} without a version pin", pkg.1, pkg.0),
            });
        }
    }
    let fetches: Vec<&str> = commands
        .iter()
        .filter(|c| matches!(command_name(c).map(|(n, _)| n), Some("curl" | "wget")))
        .flat_map(|c| c.iter().filter(|w| is_url(w)).map(String::as_str))
        .collect();
    let verified = commands.iter().any(|c| {
        command_name(c)
            .is_some_and(|(n, rest)| VERIFIERS.contains(&n) || (n == "gpg" && rest.iter().any(|w| w == "--verify")))
    });
    if let (Some(url), false) = (fetches.first(), verified) {
        out.push(LintFinding {
            rule_id: "R3".into(),
            severity: Severity::Error,
            line: ins.line(),
            message: format!("remote download {url} is not checksum-verified"),
        });
    }
}

fn lint_add(ins: &Instruction, out: &mut Vec<LintFinding>) {
    if let Args::Paths { flags, sources, .. } = &ins.parsed_args {
        if flags.iter().any(|f| f.starts_with("--checksum=")) {
            return;
        }
        if let Some(url) = sources.iter().find(|s| is_url(s)) {
            out.push(LintFinding {
                rule_id: "R3".into(),
                severity: Severity::Error,
                line: ins.line(),
                message: format!("ADD of remote {url} without --checksum"),
            });
        }
    }
}

fn is_url(w: &str) -> bool {
    w.starts_with("http://") || w.starts_with("https://") || w.starts_with("ftp://")
}

/// Skips leading `VAR=value` assignments and `sudo`/`env`.
fn command_name(cmd: &[String]) -> Option<(&str, &[String])> {
    let mut i = 0;
    while i < cmd.len() {
        let w = cmd[i].as_str();
        let assignment = w
            .split_once('=')
            .is_some_and(|(k, _)| !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        if assignment || w == "sudo" || w == "env" {
            i += 1;
            continue;
        }
        let name = w.rsplit('/').next().unwrap_or(w);
        return Some((name, &cmd[i + 1..]));
    }
    None
}

/// Manager name, install subcommands, options taking a value, pin test.
type ManagerRules = (
    &'static str,
    &'static [&'static str],
    &'static [&'static str],
    fn(&str) -> bool,
);

/// Returns (manager, package) for every unpinned package of an install command.
fn unpinned_packages(cmd: &[String]) -> Vec<(&'static str, String)> {
    let Some((name, rest)) = command_name(cmd) else {
        return Vec::new();
    };
    let (manager, subcommands, takes_value, pinned): ManagerRules = match name {
        "apt-get" | "apt" | "aptitude" => (
            "apt-get",
            &["install"],
            &["-o", "-t", "--target-release", "--option", "-c", "--config-file"],
            |p| p.contains('='),
        ),
        "yum" | "dnf" | "microdnf" => (
            "yum",
            &["install"],
            &[
                "--setopt",
                "--enablerepo",
                "--disablerepo",
                "--releasever",
                "--installroot",
                "-c",
            ],
            yum_pinned,
        ),
        "apk" => (
            "apk",
            &["add"],
            &["--virtual", "-t", "--repository", "-X", "--root", "-p", "--arch"],
            |p| p.contains('='),
        ),
        "pip" | "pip3" | "pip2" => ("pip", &["install"], PIP_VALUE_FLAGS, pip_pinned),
        "python" | "python3" | "python2" => {
            return match rest {
                [m, pip, tail @ ..] if m == "-m" && pip.starts_with("pip") => {
                    let mut again = vec!["pip".to_string()];
                    again.extend(tail.iter().cloned());
                    unpinned_packages(&again)
                }
                _ => Vec::new(),
            }
        }
        "npm" => (
            "npm",
            &["install", "i", "add"],
            &["--prefix", "--registry", "--tag"],
            |p| p.char_indices().any(|(i, c)| i > 0 && c == '@'),
        ),
        "gem" => ("gem", &["install"], &["--source", "-s", "--install-dir", "-i"], |p| {
            p.contains(':')
        }),
        _ => return Vec::new(),
    };

    let mut sub_at = None;
    let mut i = 0;
    while i < rest.len() {
        let w = rest[i].as_str();
        if w.starts_with('-') {
            i += if takes_value.contains(&w) { 2 } else { 1 };
            continue;
        }
        if subcommands.contains(&w) {
            sub_at = Some(i);
        }
        break;
    }
    let Some(sub_at) = sub_at else {
        return Vec::new();
    };
    let args = &rest[sub_at + 1..];
    if manager == "gem"
        && args
            .iter()
            .any(|w| w == "-v" || w == "--version" || w.starts_with("--version="))
    {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut skip_next = false;
    for w in args {
        if skip_next {
            skip_next = false;
            continue;
        }
        if w.starts_with('-') {
            skip_next = takes_value.contains(&w.as_str());
            continue;
        }
        let local = w.contains('$')
            || w.starts_with('.')
            || w.starts_with('/')
            || w.contains("://")
            || w.ends_with(".deb")
            || w.ends_with(".rpm")
            || w.ends_with(".whl")
            || w.ends_with(".tar.gz")
            || w.ends_with(".tgz");
        if local || pinned(w) {
            continue;
        }
        out.push((manager, w.clone()));
    }
    out
}

const PIP_VALUE_FLAGS: &[&str] = &[
    "-r",
    "--requirement",
    "-c",
    "--constraint",
    "-e",
    "--editable",
    "-i",
    "--index-url",
    "--extra-index-url",
    "-f",
    "--find-links",
    "-t",
    "--target",
    "--prefix",
    "--root",
    "--trusted-host",
];

fn pip_pinned(p: &str) -> bool {
    p.contains("==") || p.contains("@")
}

/// `name-1.2.3` (a dash followed by a digit) pins a yum package.
fn yum_pinned(p: &str) -> bool {
    p.char_indices()
        .any(|(i, c)| c == '-' && i > 0 && p[i + 1..].starts_with(|n: char| n.is_ascii_digit()))
}
