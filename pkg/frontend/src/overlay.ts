// Normalized-coordinate overlay drawing: bounding boxes and closed
// contours rendered as SVG on top of the case image.

import type { Overlays } from "./types.js";

export function parseFlat(text: string): number[] {
  const body = text.trim();
  if (!body.startsWith("[") || !body.endsWith("]")) {
    throw new Error(`not a bracketed list: ${text}`);
  }
  const inner = body.slice(1, -1).trim();
  if (inner === "") return [];
  return inner.split(",").map((tok) => {
    const value = Number(tok.trim());
    if (Number.isNaN(value)) throw new Error(`bad number ${tok}`);
    return value;
  });
}

export interface PixelRect {
  x: number;
  y: number;
  width: number;
  height: number;
}

export function boxToRect(flat: string, width: number, height: number): PixelRect {
  const [x1, y1, x2, y2] = parseFlat(flat);
  return {
    x: x1 * width,
    y: y1 * height,
    width: (x2 - x1) * width,
    height: (y2 - y1) * height,
  };
}

export function contourToPoints(flat: string, width: number, height: number): string {
  const values = parseFlat(flat);
  const parts: string[] = [];
  for (let i = 0; i < values.length; i += 2) {
    parts.push(`${values[i] * width},${values[i + 1] * height}`);
  }
  return parts.join(" ");
}

const SVG_NS = "http://www.w3.org/2000/svg";

export interface OverlayToggles {
  boxes: boolean;
  contours: boolean;
}

export function renderOverlays(
  svg: SVGSVGElement,
  overlays: Overlays,
  width: number,
  height: number,
  toggles: OverlayToggles = { boxes: true, contours: true },
): void {
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  while (svg.firstChild) svg.removeChild(svg.firstChild);
  if (toggles.boxes && overlays.boxes) {
    for (const [name, flat] of Object.entries(overlays.boxes)) {
      const rect = svg.ownerDocument.createElementNS(SVG_NS, "rect");
      const px = boxToRect(flat, width, height);
      rect.setAttribute("x", String(px.x));
      rect.setAttribute("y", String(px.y));
      rect.setAttribute("width", String(px.width));
      rect.setAttribute("height", String(px.height));
      rect.setAttribute("class", "overlay-box");
      rect.setAttribute("data-name", name);
      svg.appendChild(rect);
    }
  }
  if (toggles.contours && overlays.contours) {
    for (const [name, flat] of Object.entries(overlays.contours)) {
      // SVG polygons close themselves, so the 30-point contour renders
      // with its last vertex joined back to the first
      const poly = svg.ownerDocument.createElementNS(SVG_NS, "polygon");
      poly.setAttribute("points", contourToPoints(flat, width, height));
      poly.setAttribute("class", "overlay-contour");
      poly.setAttribute("data-name", name);
      svg.appendChild(poly);
    }
  }
}
