#pragma once

// On-disk formats. See docs/format.md for the byte layout.
//
//   .ronm  "RONM1\n", manifest byte length, JSON manifest, float64 LE blob
//   .rond  "ROND1\n", one-line JSON header, float64 LE row-major blob

#include <filesystem>
#include <string>

#include "ron/netmodel.hpp"

namespace ron {

// "teacher" or "student", read from the manifest without loading tensors.
std::string model_kind(const std::filesystem::path& path);

TeacherNetwork load_model(const std::filesystem::path& path);
void save_model(const TeacherNetwork& net, const std::filesystem::path& path);

StudentNetwork load_student(const std::filesystem::path& path);
void save_student(const StudentNetwork& net, const std::filesystem::path& path);

Matrix load_dataset(const std::filesystem::path& path);
void save_dataset(const Matrix& data, const std::filesystem::path& path);

// In-memory forms of the above, used by the file functions.
std::string serialize_model(const TeacherNetwork& net);
TeacherNetwork parse_model(const std::string& bytes);
std::string serialize_student(const StudentNetwork& net);
StudentNetwork parse_student(const std::string& bytes);

}  // namespace ron
