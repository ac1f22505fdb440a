//! LaTeX compilers.
//!
//! [`ProcessCompiler`] drives an external engine such as `pdflatex` in
//! nonstop mode. [`BuiltinChecker`] is an in-process stand-in for hosts
//! without a TeX installation: it checks group, math and environment
//! balance, reports failures in pdflatex's `! message` / `l.N` log format,
//! and writes a one-page PDF of the document text.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::texparse::{tokenize, TokenKind};

use super::ReportError;

pub const BUILTIN_COMPILER: &str = "builtin:check";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompile {
    pub exit_ok: bool,
    pub log: String,
}

pub trait Compiler: Send + Sync {
    fn name(&self) -> &str;

    /// Compiles `workdir/<tex_name>`, leaving any PDF beside it.
    fn run(&self, workdir: &Path, tex_name: &str, timeout: Duration) -> Result<RawCompile, ReportError>;
}

/// `builtin:check` selects the in-process checker; anything else is a
/// program name or path.
pub fn compiler_for(spec: &str) -> Box<dyn Compiler> {
    if spec == BUILTIN_COMPILER {
        Box::new(BuiltinChecker)
    } else {
        Box::new(ProcessCompiler::new(spec))
    }
}

pub struct ProcessCompiler {
    program: String,
}

impl ProcessCompiler {
    pub fn new(program: &str) -> Self {
        Self {
            program: program.to_string(),
        }
    }
}

impl Compiler for ProcessCompiler {
    fn name(&self) -> &str {
        &self.program
    }

    fn run(&self, workdir: &Path, tex_name: &str, timeout: Duration) -> Result<RawCompile, ReportError> {
        let out_path = workdir.join("compile.out");
        let io = |path: PathBuf| move |source| ReportError::Io { path, source };
        let out = File::create(&out_path).map_err(io(out_path.clone()))?;
        let err = out.try_clone().map_err(io(out_path.clone()))?;
        let mut child = Command::new(&self.program)
            .arg("-interaction=nonstopmode")
            .arg("-halt-on-error")
            .arg("-output-directory=.")
            .arg(tex_name)
            .current_dir(workdir)
            // Reproducible PDF timestamps and ids.
            .env("SOURCE_DATE_EPOCH", "0")
            .env("FORCE_SOURCE_DATE", "1")
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => ReportError::CompilerMissing {
                    program: self.program.clone(),
                },
                _ => ReportError::Io {
                    path: PathBuf::from(&self.program),
                    source: e,
                },
            })?;
        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(io(PathBuf::from(&self.program)))? {
                break status;
            }
            if started.elapsed() >= timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ReportError::Timeout {
                    secs: timeout.as_secs_f64(),
                });
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        let stem = tex_name.strip_suffix(".tex").unwrap_or(tex_name);
        let log = std::fs::read_to_string(workdir.join(format!("{stem}.log")))
            .or_else(|_| std::fs::read_to_string(&out_path))
            .unwrap_or_default();
        Ok(RawCompile {
            exit_ok: status.success(),
            log,
        })
    }
}

pub struct BuiltinChecker;

impl Compiler for BuiltinChecker {
    fn name(&self) -> &str {
        BUILTIN_COMPILER
    }

    fn run(&self, workdir: &Path, tex_name: &str, _timeout: Duration) -> Result<RawCompile, ReportError> {
        let tex_path = workdir.join(tex_name);
        let source = std::fs::read_to_string(&tex_path).map_err(|source| ReportError::Io {
            path: tex_path.clone(),
            source,
        })?;
        let stem = tex_name.strip_suffix(".tex").unwrap_or(tex_name);
        let mut log = format!("This is {BUILTIN_COMPILER}, a structural LaTeX checker\n({tex_name}\n");
        let exit_ok = match check_structure(&source) {
            Ok(text) => {
                let pdf_path = workdir.join(format!("{stem}.pdf"));
                std::fs::write(&pdf_path, text_pdf(&text)).map_err(|source| ReportError::Io {
                    path: pdf_path,
                    source,
                })?;
                log.push_str(&format!(")\nOutput written on {stem}.pdf (1 page).\n"));
                true
            }
            Err(e) => {
                let context = source.lines().nth(e.line - 1).unwrap_or_default();
                log.push_str(&format!("! {}\nl.{} {}\n\nNo pages of output.\n", e.message, e.line, context));
                false
            }
        };
        std::fs::write(workdir.join(format!("{stem}.log")), &log).map_err(|source| ReportError::Io {
            path: workdir.join(format!("{stem}.log")),
            source,
        })?;
        Ok(RawCompile { exit_ok, log })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureError {
    pub message: String,
    pub line: usize,
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset].matches('\n').count() + 1
}

fn env_name(source: &str, after: usize) -> Option<String> {
    let rest = source[after..].trim_start();
    let rest = rest.strip_prefix('{')?;
    let end = rest.find('}')?;
    Some(rest[..end].trim().to_string())
}

/// Checks group, math-shift and environment balance. On success returns the
/// document body lines with comment-only lines dropped.
pub fn check_structure(source: &str) -> Result<String, StructureError> {
    let err = |message: String, offset: usize| StructureError {
        message,
        line: line_of(source, offset),
    };
    let stream = tokenize(source);
    let tokens = stream.tokens();
    let mut groups: Vec<usize> = Vec::new();
    let mut envs: Vec<(String, usize)> = Vec::new();
    let mut math: Option<(bool, usize)> = None;
    let mut body: Option<(usize, usize)> = None;
    let mut body_start = None;
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let at = t.span.start;
        let lexeme = &source[t.span.clone()];
        match t.kind {
            TokenKind::Comment => {}
            TokenKind::GroupOpen => groups.push(at),
            TokenKind::GroupClose => {
                if groups.pop().is_none() {
                    return Err(err("Too many }'s.".into(), at));
                }
            }
            TokenKind::MathShift => {
                let display = tokens
                    .get(i + 1)
                    .is_some_and(|n| n.kind == TokenKind::MathShift && n.span.start == t.span.end);
                if display {
                    i += 1;
                }
                math = match math {
                    None => Some((display, at)),
                    Some((d, _)) if d == display => None,
                    Some(_) => return Err(err("Display math should end with $$.".into(), at)),
                };
            }
            TokenKind::Text => {
                if math.is_some() {
                    if let Some(pos) = paragraph_break(lexeme) {
                        return Err(err("Missing $ inserted.".into(), at + pos));
                    }
                }
            }
            TokenKind::ControlSequence if lexeme == "\\begin" || lexeme == "\\end" => {
                if math.is_some() {
                    return Err(err("Missing $ inserted.".into(), at));
                }
                let Some(name) = env_name(source, t.span.end) else {
                    return Err(err(format!("Missing environment name after {lexeme}."), at));
                };
                if lexeme == "\\begin" {
                    if name == "document" {
                        body_start = Some(source[at..].find('}').map_or(at, |p| at + p + 1));
                    } else if body_start.is_none() {
                        return Err(err("LaTeX Error: Missing \\begin{document}.".into(), at));
                    }
                    envs.push((name, at));
                } else {
                    match envs.pop() {
                        Some((open, _)) if open == name => {
                            if name == "document" {
                                body = Some((body_start.unwrap_or(at), at));
                                break;
                            }
                        }
                        Some((open, open_at)) => {
                            return Err(err(
                                format!(
                                    "LaTeX Error: \\begin{{{open}}} on input line {} ended by \\end{{{name}}}.",
                                    line_of(source, open_at)
                                ),
                                at,
                            ))
                        }
                        None => return Err(err(format!("LaTeX Error: Bad \\end{{{name}}}."), at)),
                    }
                }
            }
            _ => {}
        }
        i += 1;
    }
    if let Some((_, at)) = math {
        return Err(err("Missing $ inserted.".into(), at));
    }
    if let Some(&at) = groups.last() {
        return Err(err("Missing } inserted.".into(), at));
    }
    let Some((start, end)) = body else {
        let at = envs.last().map_or(source.len(), |e| e.1);
        return match body_start {
            None => Err(err("LaTeX Error: Missing \\begin{document}.".into(), source.len())),
            Some(_) => Err(err("Emergency stop. *** (job aborted, no legal \\end found)".into(), at)),
        };
    };
    Ok(source[start..end]
        .lines()
        .filter(|l| !l.trim_start().starts_with('%'))
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n"))
}

fn paragraph_break(text: &str) -> Option<usize> {
    let mut newline = None;
    for (i, c) in text.char_indices() {
        match c {
            '\n' if newline.is_some() => return newline,
            '\n' => newline = Some(i),
            ' ' | '\t' | '\r' => {}
            _ => newline = None,
        }
    }
    None
}

/// A minimal single-page PDF showing `text` in Helvetica.
pub fn text_pdf(text: &str) -> Vec<u8> {
    let mut content = String::from("BT /F1 9 Tf 40 760 Td 11 TL\n");
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let escaped: String = line
            .chars()
            .map(|c| match c {
                '(' | ')' | '\\' => format!("\\{c}"),
                c if c.is_ascii() && !c.is_ascii_control() => c.to_string(),
                _ => "?".to_string(),
            })
            .collect();
        content.push_str(&format!("({escaped}) '\n"));
    }
    content.push_str("ET\n");
    let objects = [
        "<< /Type /Catalog /Pages 2 0 R >>".to_string(),
        "<< /Type /Pages /Kids [3 0 R] /Count 1 >>".to_string(),
        "<< /Type /Page /Parent 2 0 R /MediaBox [0 0 612 792] /Contents 4 0 R /Resources << /Font << /F1 5 0 R >> >> >>"
            .to_string(),
        format!("<< /Length {} >>\nstream\n{content}endstream", content.len()),
        "<< /Type /Font /Subtype /Type1 /BaseFont /Helvetica >>".to_string(),
    ];
    let mut pdf = String::from("%PDF-1.4\n");
    let mut offsets = Vec::new();
    for (n, body) in objects.iter().enumerate() {
        offsets.push(pdf.len());
        pdf.push_str(&format!("{} 0 obj\n{body}\nendobj\n", n + 1));
    }
    let xref = pdf.len();
    pdf.push_str(&format!("xref\n0 {}\n0000000000 65535 f \n", objects.len() + 1));
    for off in offsets {
        pdf.push_str(&format!("{off:010} 00000 n \n"));
    }
    pdf.push_str(&format!(
        "trailer\n<< /Size {} /Root 1 0 R >>\nstartxref\n{xref}\n%%EOF\n",
        objects.len() + 1
    ));
    pdf.into_bytes()
}
