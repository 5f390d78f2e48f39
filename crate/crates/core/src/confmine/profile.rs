use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ConfigFormat;
use crate::layerfs::{FileRecord, ImageFs, PathMatcher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistroFamily {
    Debian,
    Rhel,
    Alpine,
    Generic,
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("profile {0} has no generic config path pattern")]
    NoGenericPattern(String),
    #[error("profile {id}: pattern {pattern:?} is not absolute")]
    RelativePattern { id: String, pattern: String },
    #[error("profile {id}: bad glob {pattern:?}: {message}")]
    BadGlob {
        id: String,
        pattern: String,
        message: String,
    },
    #[error("profile file: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareProfile {
    pub software_id: String,
    pub config_paths: BTreeMap<DistroFamily, Vec<String>>,
    #[serde(default = "unknown_format")]
    pub format: ConfigFormat,
    #[serde(default)]
    pub binary_paths: Vec<String>,
}

fn unknown_format() -> ConfigFormat {
    ConfigFormat::Unknown
}

#[derive(Deserialize)]
struct ProfileFile {
    #[serde(default)]
    profile: Vec<SoftwareProfile>,
}

impl SoftwareProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self
            .config_paths
            .get(&DistroFamily::Generic)
            .is_none_or(|g| g.is_empty())
        {
            return Err(ProfileError::NoGenericPattern(self.software_id.clone()));
        }
        for pattern in self.config_paths.values().flatten().chain(&self.binary_paths) {
            if !pattern.starts_with('/') {
                return Err(ProfileError::RelativePattern {
                    id: self.software_id.clone(),
                    pattern: pattern.clone(),
                });
            }
            PathMatcher::new(&[pattern]).map_err(|e| ProfileError::BadGlob {
                id: self.software_id.clone(),
                pattern: pattern.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Every config path pattern across all families.
    pub fn all_config_patterns(&self) -> impl Iterator<Item = &String> {
        self.config_paths.values().flatten()
    }

    fn matcher(&self, family: Option<DistroFamily>) -> PathMatcher {
        let mut patterns: Vec<&String> = self
            .config_paths
            .get(&DistroFamily::Generic)
            .into_iter()
            .flatten()
            .collect();
        if let Some(f) = family.filter(|f| *f != DistroFamily::Generic) {
            patterns.extend(self.config_paths.get(&f).into_iter().flatten());
        }
        PathMatcher::new(&patterns).expect("validated profile")
    }
}

/// Parses a TOML profile file:
///
/// ```toml
/// [[profile]]
/// software_id = "mysqld"
/// format = "ini"
/// binary_paths = ["/usr/sbin/mysqld"]
/// [profile.config_paths]
/// generic = ["/etc/my.cnf", "/etc/mysql/my.cnf"]
/// debian = ["/etc/mysql/conf.d/*.cnf"]
/// ```
pub fn load_profiles(text: &str) -> Result<Vec<SoftwareProfile>, ProfileError> {
    let file: ProfileFile = toml::from_str(text)?;
    for p in &file.profile {
        p.validate()?;
    }
    Ok(file.profile)
}

const BUILTIN: &str = r#"
[[profile]]
software_id = "mysqld"
format = "ini"
binary_paths = ["/usr/sbin/mysqld", "/usr/bin/mysqld"]
[profile.config_paths]
generic = ["/etc/my.cnf", "/etc/mysql/my.cnf", "/usr/etc/my.cnf"]
debian = ["/etc/mysql/conf.d/*.cnf", "/etc/mysql/mysql.conf.d/*.cnf", "/etc/mysql/mariadb.conf.d/*.cnf"]
rhel = ["/etc/my.cnf.d/*.cnf"]
alpine = ["/etc/my.cnf.d/*.cnf", "/etc/mysql/*.cnf"]

[[profile]]
software_id = "httpd"
format = "directive"
binary_paths = ["/usr/sbin/httpd", "/usr/sbin/apache2", "/usr/local/apache2/bin/httpd"]
[profile.config_paths]
generic = ["/usr/local/apache2/conf/httpd.conf", "/usr/local/apache2/conf/extra/*.conf"]
debian = ["/etc/apache2/apache2.conf", "/etc/apache2/ports.conf", "/etc/apache2/conf-enabled/*.conf", "/etc/apache2/sites-enabled/*.conf"]
rhel = ["/etc/httpd/conf/httpd.conf", "/etc/httpd/conf.d/*.conf"]
alpine = ["/etc/apache2/httpd.conf", "/etc/apache2/conf.d/*.conf"]

[[profile]]
software_id = "redis"
format = "key-value"
binary_paths = ["/usr/local/bin/redis-server", "/usr/bin/redis-server"]
[profile.config_paths]
generic = ["/usr/local/etc/redis/redis.conf", "/etc/redis.conf", "/etc/redis/redis.conf"]

[[profile]]
software_id = "postgres"
format = "key-value"
binary_paths = ["/usr/lib/postgresql/*/bin/postgres", "/usr/local/bin/postgres"]
[profile.config_paths]
generic = ["/var/lib/postgresql/data/postgresql.conf", "/usr/share/postgresql/postgresql.conf.sample", "/usr/local/share/postgresql/postgresql.conf.sample"]
debian = ["/usr/share/postgresql/*/postgresql.conf.sample", "/etc/postgresql/*/main/postgresql.conf"]
"#;

pub fn builtin_profiles() -> Vec<SoftwareProfile> {
    load_profiles(BUILTIN).expect("builtin profiles are valid")
}

/// Detects the distribution family from its release marker file.
pub fn detect_distro(fs: &ImageFs) -> DistroFamily {
    if fs.contains("/etc/debian_version") {
        DistroFamily::Debian
    } else if fs.contains("/etc/redhat-release") {
        DistroFamily::Rhel
    } else if fs.contains("/etc/alpine-release") {
        DistroFamily::Alpine
    } else {
        DistroFamily::Generic
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub software_id: String,
    pub path: String,
    pub format: ConfigFormat,
    pub record: FileRecord,
}

/// Regular files matching the profile's generic patterns or the patterns of
/// the detected distribution family, in path order.
pub fn locate_configs(fs: &ImageFs, profile: &SoftwareProfile) -> Vec<ConfigFile> {
    let m = profile.matcher(Some(detect_distro(fs)));
    fs.regular_files()
        .filter(|r| m.is_match(&r.path))
        .map(|r| ConfigFile {
            software_id: profile.software_id.clone(),
            path: r.path.clone(),
            format: profile.format,
            record: r.clone(),
        })
        .collect()
}
