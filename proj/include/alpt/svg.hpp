#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "alpt/error.hpp"

namespace alpt {

// Minimal SVG document builder, enough for grid renderings and line charts.
class SvgDoc {
 public:
  SvgDoc(double width, double height) : width_(width), height_(height) {}

  void rect(double x, double y, double w, double h, const std::string& fill,
            const std::string& stroke = "none", double stroke_width = 0.0) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w
          << "\" height=\"" << h << "\" fill=\"" << fill << "\"";
    if (stroke != "none")
      body_ << " stroke=\"" << stroke << "\" stroke-width=\"" << stroke_width << "\"";
    body_ << "/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double stroke_width = 1.0, const std::string& dash = "") {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\""
          << y2 << "\" stroke=\"" << stroke << "\" stroke-width=\"" << stroke_width << "\"";
    if (!dash.empty()) body_ << " stroke-dasharray=\"" << dash << "\"";
    body_ << "/>\n";
  }

  void circle(double cx, double cy, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r << "\" fill=\""
          << fill << "\"/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                double stroke_width = 1.5) {
    if (pts.empty()) return;
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\""
          << stroke_width << "\" points=\"";
    for (const auto& [x, y] : pts) body_ << x << "," << y << " ";
    body_ << "\"/>\n";
  }

  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill,
               double opacity = 1.0) {
    if (pts.empty()) return;
    body_ << "<polygon fill=\"" << fill << "\" fill-opacity=\"" << opacity
          << "\" stroke=\"none\" points=\"";
    for (const auto& [x, y] : pts) body_ << x << "," << y << " ";
    body_ << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, double size = 12.0,
            const std::string& fill = "#333", const std::string& anchor = "start") {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
          << "\" font-family=\"monospace\" fill=\"" << fill << "\" text-anchor=\"" << anchor
          << "\">" << escape(s) << "</text>\n";
  }

  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_ << "\" height=\""
        << height_ << "\" viewBox=\"0 0 " << width_ << " " << height_ << "\">\n"
        << body_.str() << "</svg>\n";
    return out.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCategory::Io, "cannot open " + path.string());
    out << str();
    require(out.good(), ErrorCategory::Io, "write failed for " + path.string());
  }

 private:
  static std::string escape(const std::string& s) {
    std::string r;
    for (char c : s) {
      switch (c) {
        case '&': r += "&amp;"; break;
        case '<': r += "&lt;"; break;
        case '>': r += "&gt;"; break;
        default: r += c;
      }
    }
    return r;
  }

  double width_, height_;
  std::ostringstream body_;
};

}  // namespace alpt
