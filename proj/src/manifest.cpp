#include "mvseg/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "mvseg/error.hpp"

namespace mvseg {
namespace {

constexpr const char* kHeader = "subject_id,scanner_id,image_path,label_path";

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::filesystem::path Manifest::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

const SubjectRecord& Manifest::find(const std::string& subject_id) const {
  for (const auto& s : subjects) {
    if (s.subject_id == subject_id) return s;
  }
  throw ConfigError("subject not in manifest: " + subject_id);
}

void Manifest::validate() const {
  std::set<std::string> seen;
  for (const auto& s : subjects) {
    if (s.subject_id.empty()) throw ConfigError("manifest row with empty subject_id");
    if (!seen.insert(s.subject_id).second) throw ConfigError("duplicate subject_id in manifest: " + s.subject_id);
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  Manifest manifest;
  manifest.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");

  std::string line;
  if (!std::getline(in, line) || trim(line) != kHeader) {
    throw FormatError("manifest must start with header '" + std::string(kHeader) + "': " + path.string());
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(trim(line));
    if (fields.size() < 3 || fields.size() > 4) {
      throw FormatError("manifest line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                        " fields: " + path.string());
    }
    SubjectRecord rec;
    rec.subject_id = trim(fields[0]);
    rec.scanner_id = trim(fields[1]);
    rec.image_path = trim(fields[2]);
    if (fields.size() == 4 && !trim(fields[3]).empty()) rec.label_path = trim(fields[3]);
    manifest.subjects.push_back(std::move(rec));
  }
  manifest.validate();
  return manifest;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << kHeader << '\n';
  for (const auto& s : manifest.subjects) {
    for (const std::string* field : {&s.subject_id, &s.scanner_id, &s.image_path}) {
      if (field->find(',') != std::string::npos) throw FormatError("manifest field contains a comma: " + *field);
    }
    out << s.subject_id << ',' << s.scanner_id << ',' << s.image_path << ',' << s.label_path.value_or("") << '\n';
  }
  if (!out) throw IoError("failed writing manifest: " + path.string());
}

}  // namespace mvseg
