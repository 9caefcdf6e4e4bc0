# Cloud-cluster decentralized detection package
