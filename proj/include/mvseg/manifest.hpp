#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mvseg {

struct SubjectRecord {
  std::string subject_id;
  std::string scanner_id;
  std::string image_path;
  std::optional<std::string> label_path;  // absent for inference-only subjects
};

/// Subjects plus the directory their relative paths are resolved against.
struct Manifest {
  std::filesystem::path base_dir;
  std::vector<SubjectRecord> subjects;

  std::filesystem::path resolve(const std::string& path) const;
  const SubjectRecord& find(const std::string& subject_id) const;

  /// Throws ConfigError on duplicate subject ids.
  void validate() const;
};

/// CSV with header `subject_id,scanner_id,image_path,label_path`; an empty
/// label_path means no label.
Manifest read_manifest(const std::filesystem::path& path);

/// Writes paths as stored (callers keep them relative to the manifest's
/// directory).
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

}  // namespace mvseg
