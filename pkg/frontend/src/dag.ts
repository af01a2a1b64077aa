// Layered left-to-right layout for the run's dependency graph.

import type { DagEdge, DagNode } from "./types.js";

export interface LayeredDag {
  /** Columns ordered by dependency depth; nodes keep stream order. */
  layers: DagNode[][];
  edges: DagEdge[];
}

export function layerDag(nodes: DagNode[], edges: DagEdge[]): LayeredDag {
  const depth = new Map<string, number>();
  const parents = new Map<string, string[]>();
  for (const edge of edges) {
    const list = parents.get(edge.target) ?? [];
    list.push(edge.source);
    parents.set(edge.target, list);
  }
  // nodes arrive in dispatch order, so parents are always resolved first
  for (const node of nodes) {
    const parentDepths = (parents.get(node.id) ?? []).map(
      (p) => depth.get(p) ?? 0,
    );
    depth.set(node.id, parentDepths.length ? Math.max(...parentDepths) + 1 : 0);
  }
  const layers: DagNode[][] = [];
  for (const node of nodes) {
    const column = depth.get(node.id) ?? 0;
    while (layers.length <= column) {
      layers.push([]);
    }
    layers[column].push(node);
  }
  return { layers, edges };
}
